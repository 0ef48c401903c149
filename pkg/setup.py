# -*- coding: utf-8 -*-
__license__ = """
This file is part of busfusion.
busfusion is free software: you can redistribute it and/or modify
it under the terms of the GNU General Public License as
published by the Free Software Foundation, either version 3 of
the License, or (at your option) any later version.
busfusion is distributed in the hope that it will be useful, but
WITHOUT ANY WARRANTY; without even the implied warranty of
MERCHANTABILITY or FITNESS FOR A PARTICULAR PURPOSE.  See the
GNU General Public License for more details.
You should have received a copy of the GNU General
Public License along with busfusion.  If not, see
<http://www.gnu.org/licenses/>.
"""
# pylint: disable=bad-whitespace

import setuptools

from busfusion.__version__ import __version__

setuptools.setup(
    name="busfusion",
    version=__version__,
    license="GPLv3",
    keywords="breast ultrasound, segmentation, classification, cnn-transformer",
    description="Multi-task breast ultrasound lesion segmentation and classification "
    "with a dual-branch CNN/windowed-attention network.",
    long_description=open("README.rst").read(),
    long_description_content_type="text/x-rst",
    packages=setuptools.find_packages(exclude=["tests"]),
    install_requires=[
        "tablib>=3.0.0,<4",
        "openpyxl>=3,<4",
        "Click>=7.1,<9",
        "colorama",
        "numpy>=1.22",
        "scipy>=1.8",
        "torch>=2.0",
        "torchvision>=0.15",
        "Pillow>=9",
        "matplotlib>=3.5",
    ],
    extras_require={
        "reference": ["timm>=0.9"],
        "docs": ["Sphinx", "sphinx-click>=2.7", "sphinx-rtd-theme"],
        "tests": ["pytest>=6", "coverage", "pytest-cov", "pytest-random-order"],
        "code_audit": ["black", "isort"],
    },
    include_package_data=True,
    python_requires=">=3.9",
    classifiers=[
        "Development Status :: 2 - Pre-Alpha",
        "License :: OSI Approved :: GNU General Public License v3 (GPLv3)",
        "Programming Language :: Python",
        "Programming Language :: Python :: 3 :: Only",
        "Programming Language :: Python :: 3.9",
        "Programming Language :: Python :: 3.10",
        "Programming Language :: Python :: 3.11",
        "Topic :: Scientific/Engineering :: Medical Science Apps.",
    ],
    entry_points={
        "console_scripts": [
            "busfusion = busfusion.scripts.console:console",
        ]
    },
)
