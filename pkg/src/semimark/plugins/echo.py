"""Copy the input image unchanged: ``python -m semimark.plugins.echo IN OUT [ARGS]``."""

import shutil
import sys

if __name__ == "__main__":
    shutil.copyfile(sys.argv[1], sys.argv[2])
