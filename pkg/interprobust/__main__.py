import sys

from interprobust.cli import main

sys.exit(main())
