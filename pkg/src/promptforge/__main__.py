import sys

from promptforge.cli import main

sys.exit(main())
