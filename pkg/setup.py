#!/usr/bin/env python
"""Install snflow."""

import setuptools

setuptools.setup()
