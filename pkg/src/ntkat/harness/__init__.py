"""Data loading, configuration, experiment runners and the CLI."""
