# -*- coding: utf-8 -*-
#
# Sphinx configuration for the weighted-dice-seg documentation.

import os
import sys

sys.path.insert(0, os.path.abspath("../../src"))

# -- Project information -----------------------------------------------------

project = "Weighted Dice Segmentation"
copyright = "2024, Weighted Dice Segmentation Developers"
author = "Weighted Dice Segmentation Developers"

version = "0.1.0"
release = "0.1.0"

# -- General configuration ---------------------------------------------------

extensions = [
    "sphinx.ext.autodoc",
    "sphinx.ext.napoleon",
    "sphinx.ext.mathjax",
    "sphinx.ext.viewcode",
    "sphinx.ext.autosectionlabel",
    "sphinx_copybutton",
    "sphinx_new_tab_link",
    "ska_ser_sphinx_theme",
]

autodoc_member_order = "bysource"
autosectionlabel_prefix_document = True

source_suffix = ".rst"
master_doc = "index"
language = "en"
exclude_patterns = []
pygments_style = "sphinx"

# -- Options for HTML output -------------------------------------------------

html_theme = "ska_ser_sphinx_theme"
html_context = {
    "display_github": True,
    "favicon": "img/favicon.ico",
    "logo": "img/logo.svg",
    "theme_logo_only": True,
    "github_version": "master",
    "conf_py_path": "/src/",
}
htmlhelp_basename = "weighteddicesegdoc"

# -- Options for other builders ----------------------------------------------

man_pages = [
    (master_doc, "weighted-dice-seg", "Weighted Dice Segmentation Documentation", [author], 1)
]
