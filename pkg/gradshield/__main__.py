import sys

from gradshield.main import main

sys.exit(main())
