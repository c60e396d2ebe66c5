from kbcmlm.cli import main
import sys

sys.exit(main())
