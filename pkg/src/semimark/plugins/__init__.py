"""Reference manipulation plugins used as fixtures for the plugin protocol."""
