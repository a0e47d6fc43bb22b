"""The tests for snflow."""
