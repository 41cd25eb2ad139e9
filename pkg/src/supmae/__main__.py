import sys

from supmae.clirun import main

sys.exit(main())
