import sys

from joinbound.cli import main

sys.exit(main())
