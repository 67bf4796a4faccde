import sys

from csilab.main import main


if __name__ == "__main__":
    sys.exit(main())
