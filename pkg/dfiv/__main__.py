import sys

from dfiv.main import main

sys.exit(main())
