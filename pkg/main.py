import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "backend"))

from cli import run_cli  # noqa: E402


def main():
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
