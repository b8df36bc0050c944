"""The facade's codec must emit the exact normative bytes."""

import numpy as np
import pytest

from sharedloader import abi


class TestFrozenBytes:
    def test_shutdown_frame(self):
        assert abi.encode(abi.Shutdown_()) == bytes([0x01, 0, 0, 0, 0x09])

    def test_ack_frame(self):
        frame = abi.encode(abi.Ack_(consumer_id=7, epoch=0, batch_index=42))
        assert frame == (
            b"\x15\x00\x00\x00\x04"
            b"\x07\x00\x00\x00\x00\x00\x00\x00"
            b"\x00\x00\x00\x00"
            b"\x2a\x00\x00\x00\x00\x00\x00\x00"
        )

    def test_join_roundtrip(self):
        msg = abi.Join_(123456789, 1)
        assert abi.decode(abi.encode(msg)) == msg

    def test_announce_roundtrip(self):
        msg = abi.Announce_(2, 9, "tsk-1-2-9", 512 * 4, 3, (512,), 0xABCD1234)
        assert abi.decode(abi.encode(msg)) == msg

    def test_all_kinds_numbered(self):
        messages = [
            abi.Join_(1),
            abi.Welcome_(1, 0, 10, 0, 2, 2),
            abi.Announce_(0, 0, "x", 8, 2, (1,), 0),
            abi.Ack_(1, 0, 0),
            abi.Heartbeat_(1, 0),
            abi.EpochStart_(0, 1),
            abi.EpochEnd_(0),
            abi.Bye_(1),
            abi.Shutdown_(),
        ]
        assert [abi.encode(m)[4] for m in messages] == list(range(1, 10))

    def test_stream_decoder_chunking(self):
        stream = b"".join(
            abi.encode(m) for m in (abi.Heartbeat_(5, 7), abi.EpochEnd_(3), abi.Shutdown_())
        )
        decoder = abi.StreamDecoder()
        out = []
        for i in range(0, len(stream), 3):
            out.extend(decoder.feed(stream[i : i + 3]))
        assert out == [abi.Heartbeat_(5, 7), abi.EpochEnd_(3), abi.Shutdown_()]


class TestSegments:
    def test_create_read_header(self):
        payload = bytes(range(256))
        shm = abi.create_segment("sl-test-1", 4, 7, 0, (256,), payload)
        try:
            header = abi.read_header(shm.buf)
            assert header.epoch == 4
            assert header.batch_index == 7
            assert header.shape == (256,)
            assert header.byte_len == 256
            assert header.checksum == abi.crc32(payload)
            assert bytes(shm.buf[80 : 80 + 256]) == payload
        finally:
            abi.release_segment(shm, "sl-test-1")

    def test_pair_encoding_roundtrip(self):
        inp = np.arange(24, dtype=np.float32).reshape(2, 3, 4)
        tgt = np.array([1, 0], dtype=np.int64)
        payload = inp.tobytes() + tgt.tobytes()
        reserved = abi.pack_pair_reserved(3, inp.ndim, 2, tgt.ndim, inp.nbytes)
        shm = abi.create_segment(
            "sl-test-pair", 0, 0, 0, (len(payload),), payload,
            reserved=reserved, extra_slots=(*inp.shape, *tgt.shape),
        )
        try:
            header = abi.read_header(shm.buf)
            (in_dtype, in_shape), (tg_dtype, tg_shape), in_bytes = abi.unpack_pair(header)
            assert (in_dtype, in_shape) == (3, (2, 3, 4))
            assert (tg_dtype, tg_shape) == (2, (2,))
            assert in_bytes == inp.nbytes
        finally:
            abi.release_segment(shm, "sl-test-pair")

    def test_non_pair_segment_unpacks_to_none(self):
        shm = abi.create_segment("sl-test-plain", 0, 0, 0, (8,), bytes(8))
        try:
            assert abi.unpack_pair(abi.read_header(shm.buf)) is None
        finally:
            abi.release_segment(shm, "sl-test-plain")

    def test_too_many_dims_rejected(self):
        with pytest.raises(abi.AbiError):
            abi.create_segment(
                "sl-test-dims", 0, 0, 0, (8,), bytes(8), extra_slots=(1,) * 8
            )
