"""Allow ``python -m mixed_trees``."""

from mixed_trees.cli import main

raise SystemExit(main())
