"""Enable 'python -m snflow'."""

from .cli import cli

cli(prog_name="snflow")
