import os
import sys

# tests import the shared oracles module by file location
sys.path.insert(0, os.path.dirname(__file__))
