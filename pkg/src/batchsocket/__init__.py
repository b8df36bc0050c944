"""batchsocket: one producer prepares each mini-batch exactly once and serves
it zero-copy through shared memory to any number of collocated consumers,
coordinated by an ack/heartbeat protocol with bounded drift.
"""

from .consumer import (
    ConnectError,
    ConsumerConfig,
    ConsumerSession,
    EndOfStream,
    EpochBoundary,
    ProtocolError,
    connect,
    release_view,
)
from .payload import (
    BatchDescriptor,
    BatchView,
    CorruptSegmentError,
    ResourceError,
    SharedPayload,
    StaleHandleError,
    create_segment,
    map_segment,
    release_segment,
)
from .pipeline import (
    DatasetSpec,
    DirectorySource,
    PipelineError,
    PrepSpec,
    SyntheticSource,
    epoch_order,
    prep_throughput,
    prepare_batch,
)
from .producer import Producer, ProducerConfig, ProducerError, RunReport
from .wire import (
    Ack,
    Announce,
    Bye,
    ControlMessage,
    DecodeError,
    DType,
    EncodeError,
    EpochEnd,
    EpochStart,
    Heartbeat,
    Join,
    PROTOCOL_VERSION,
    Shutdown,
    Welcome,
    checksum,
    decode_message,
    encode_message,
)

__version__ = "0.1.0"
