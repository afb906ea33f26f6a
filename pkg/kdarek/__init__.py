__version__ = "0.1.0"


def main():
    """Main entry point for the package."""
    from kdarek.cli import main as cli_main

    return cli_main()


# Expose important items at package level
__all__ = ['main', '__version__']
