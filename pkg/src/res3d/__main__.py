import sys

from res3d.cli import main

sys.exit(main())
