import os
import sys

# Les modules de src/ s'importent entre eux en absolu
sys.path.insert(0, os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), 'src'))
os.environ.setdefault('KFAAR_LOG_FILE', os.path.join('logs', 'kfaar-tests.log'))
