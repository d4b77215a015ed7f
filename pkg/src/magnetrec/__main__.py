"""Entry point for running magnetrec as a module: python -m magnetrec."""

from magnetrec.cli import main

if __name__ == "__main__":
    main()
