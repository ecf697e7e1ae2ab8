"""Main entry point for the tf4ctr command-line interface."""

from tf4ctr.cli import cli

if __name__ == "__main__":
    cli()
