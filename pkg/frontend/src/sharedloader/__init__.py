"""sharedloader: drop-in producer/loader pair for shared batch streaming.

The producer side wraps any iterable of (input, target) array pairs; the
consumer side is a blocking iterator yielding those pairs reconstructed
zero-copy from shared memory. Both speak the batchsocket wire and segment
ABI directly and interoperate with the native tooling.
"""

from .loader import SharedLoader, StreamError
from .producer import TensorProducer

__version__ = "0.1.0"
