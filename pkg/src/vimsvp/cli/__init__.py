"""Command-line workflows and gate introspection."""
