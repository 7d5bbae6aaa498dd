#!/usr/bin/env python

from setuptools import find_packages, setup

version = "0.1.0"

with open("README.md") as f:
    readme = f.read()

setup(
    name="qkica",
    version=version,
    description="""Kernel ICA with the determinant contrast, emulation of its
    quantum estimator's measurement errors, and the experiments around it.""",
    long_description=readme,
    long_description_content_type="text/markdown",
    keywords=["ica", "kernel-methods", "blind-source-separation", "quantum-algorithms", "nystrom"],
    license="MIT",
    entry_points={"console_scripts": ["qkica=qkica.cli:main"]},
    python_requires=">=3.8, <4",
    install_requires=["pyyaml>=6.0.0", "numpy>=1.22", "scipy>=1.9", "matplotlib>=3.5"],
    extras_require={"test": ["pytest>=7"]},
    packages=find_packages(exclude=("docs", "tests")),
    include_package_data=True,
    zip_safe=False,
)
