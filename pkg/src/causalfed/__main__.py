import sys

from causalfed.harness import main

sys.exit(main())
