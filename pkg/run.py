import sys

from app.main import main

if __name__ == "__main__":
    # e.g. python run.py --config model_config/merton.json --subcommand solve --out output/merton
    sys.exit(main())
