# Configuration file for the Sphinx documentation builder.
#
# This file only contains a selection of the most common options. For a full
# list see the documentation:
# https://www.sphinx-doc.org/en/master/usage/configuration.html

import shutil
from importlib import metadata
from pathlib import Path

# -- Project information -----------------------------------------------------

project = 'nkit'
copyright = '2026, The nkit developers'
author = 'The nkit developers'

# The full version, including alpha/beta/rc tags
release = metadata.version("nkit")
# The short X.Y version
version = ".".join(release.split(".")[:2])

# README and CHANGELOG live at the repository root.
_includes = Path(__file__).parent / "includes"
_includes.mkdir(exist_ok=True)
for _name in ("README.rst", "CHANGELOG.rst"):
    shutil.copy(Path(__file__).parent.parent / _name, _includes / _name)

# -- General configuration ---------------------------------------------------

# Add any Sphinx extension module names here, as strings. They can be
# extensions coming with Sphinx (named 'sphinx.ext.*') or your custom
# ones.
extensions = ["sphinx.ext.autodoc", 'sphinxarg.ext']

# Add any paths that contain templates here, relative to this directory.
templates_path = ['_templates']

# List of patterns, relative to source directory, that match files and
# directories to ignore when looking for source files.
# This pattern also affects html_static_path and html_extra_path.
# includes/* prevents double indexing
exclude_patterns = ['_build', 'Thumbs.db', '.DS_Store', 'includes/*']


# -- Options for HTML output -------------------------------------------------

# The theme to use for HTML and HTML Help pages.  See the documentation for
# a list of builtin themes.
#
html_theme = 'sphinx_rtd_theme'
html_theme_options = dict(
    display_version=True,
)

# Add any paths that contain custom static files (such as style sheets) here,
# relative to this directory. They are copied after the builtin static files,
# so a file named "default.css" will overwrite the builtin "default.css".
html_static_path = ['_static']
