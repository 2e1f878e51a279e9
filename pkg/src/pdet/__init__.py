__title__ = 'pdet'
__version__ = '0.1.0'
__author__ = 'The pdet developers'
__license__ = 'MIT License'
__copyright__ = 'Copyright 2026 The pdet developers'

# Version synonym
VERSION = __version__

# On-disk container magics
DATASET_MAGIC = b'PDETDATA'
CHECKPOINT_MAGIC = b'PDETCKPT'

from .common import LOGGER, PdetGlobalSettings
from .exceptions import *
