"""``python -m app <subcommand> ...``"""
from app.cli import main

if __name__ == "__main__":
    main()
