"""Python setup script for installing aortaseg."""

from setuptools import setup

setup()
