"""``python -m instcache.model --model SPEC [--port N]``: serve a model over the wire protocol."""

import sys

from .external import main

sys.exit(main())
