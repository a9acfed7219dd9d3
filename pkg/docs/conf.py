# Sphinx configuration for midlevel-features.

import os
import sys

sys.path.insert(0, os.path.abspath(os.path.join("..", "src")))

project = 'midlevel-features'
copyright = '2026, midlevel-features contributors'
author = 'midlevel-features contributors'

extensions = ['sphinx.ext.autodoc']
autodoc_member_order = 'bysource'
autodoc_mock_imports = ['soundfile', 'librosa']

templates_path = ['_templates']
exclude_patterns = ['_build', 'Thumbs.db', '.DS_Store']

html_theme = 'alabaster'
html_static_path = ['_static']
