from stwave.cli import main
import sys

sys.exit(main())
