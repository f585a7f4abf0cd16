import socket
import threading
import time

import numpy as np
import pytest

from tiledflow.bridge import (
    Frame,
    HEADER_SIZE,
    MAGIC,
    MAX_PAYLOAD,
    ProviderServer,
    RemoteProvider,
    TYPE_ERROR,
    TYPE_REQUEST,
    TYPE_RESPONSE,
    decode_frame,
    encode_eval_request,
    encode_frame,
    EvalRequest,
    parse_eval_request,
    serialize_sparse,
    deserialize_sparse,
)
from tiledflow.errors import IncompleteFrameError, ProtocolError, ProviderError
from tiledflow.flowcore import (
    GlobalOracleProvider,
    OracleConditioner,
    VectorFieldProvider,
    ZeroFieldProvider,
    extended_field,
)
from tiledflow.lattice import DenseLatent, Dims, init_sparse_noise
from tiledflow.patchwork import make_patch_grid
from tiledflow.priors import ConditionEmbedding


DIMS = Dims(2, 2, 4, 8, C=1, l=3)


def random_dense(dims, seed):
    rng = np.random.default_rng(seed)
    return DenseLatent(dims, rng.standard_normal(dims.dense_shape, dtype=np.float32))


class TestFraming:
    def test_round_trip_fuzz(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            ftype = int(rng.choice([TYPE_REQUEST, TYPE_RESPONSE, TYPE_ERROR]))
            rid = int(rng.integers(0, 2**63))
            payload = rng.bytes(int(rng.integers(0, 200)))
            frame = Frame(ftype, rid, payload)
            decoded, consumed = decode_frame(encode_frame(frame))
            assert decoded == frame
            assert consumed == HEADER_SIZE + len(payload)

    def test_magic_bytes(self):
        blob = encode_frame(Frame(TYPE_REQUEST, 1, b""))
        assert blob[:4] == bytes([0x58, 0x46, 0x50, 0x31])
        assert MAGIC == b"XFP1"

    def test_cut_mid_payload_is_incomplete(self):
        blob = encode_frame(Frame(TYPE_RESPONSE, 7, b"payload-bytes"))
        for cut in (0, 5, HEADER_SIZE, len(blob) - 1):
            with pytest.raises(IncompleteFrameError):
                decode_frame(blob[:cut])

    def test_bad_magic(self):
        blob = bytearray(encode_frame(Frame(TYPE_REQUEST, 1, b"x")))
        blob[0] = 0x59
        with pytest.raises(ProtocolError):
            decode_frame(bytes(blob))

    def test_unknown_type(self):
        blob = bytearray(encode_frame(Frame(TYPE_REQUEST, 1, b"x")))
        blob[4] = 99
        with pytest.raises(ProtocolError):
            decode_frame(bytes(blob))

    def test_oversize_payload_rejected(self):
        import struct

        header = struct.pack("<4sBQI", MAGIC, TYPE_REQUEST, 1, MAX_PAYLOAD + 1)
        with pytest.raises(ProtocolError):
            decode_frame(header)

    def test_decoder_never_reads_past_payload_len(self):
        a = encode_frame(Frame(TYPE_REQUEST, 1, b"abc"))
        b = encode_frame(Frame(TYPE_RESPONSE, 2, b"defg"))
        frame, consumed = decode_frame(a + b)
        assert frame.payload == b"abc"
        frame2, _ = decode_frame((a + b)[consumed:])
        assert frame2.payload == b"defg"


class TestEvalPayloads:
    def test_dense_round_trip(self):
        patch = random_dense(DIMS.patch_dims(), 1)
        req = EvalRequest(0.5, 1, patch.data.shape, b"cond", patch.data.tobytes())
        back = parse_eval_request(encode_eval_request(req))
        assert back == req

    def test_sparse_round_trip(self):
        coords = np.array([[0, 0, 0], [3, 5, 7]])
        slat = init_sparse_noise(coords, DIMS, seed=0)
        blob = serialize_sparse(slat)
        back = deserialize_sparse(blob, DIMS)
        assert np.array_equal(back.coords, slat.coords)
        assert np.array_equal(back.features, slat.features)

    def test_mode_validated(self):
        with pytest.raises(ProtocolError):
            parse_eval_request(encode_eval_request(EvalRequest(0.5, 9, (1, 1, 1, 1), b"", b"\x00" * 4)))

    def test_dense_payload_length_checked(self):
        req = EvalRequest(0.5, 1, (2, 2, 2, 1), b"", b"\x00" * 7)
        with pytest.raises(ProtocolError):
            parse_eval_request(encode_eval_request(req))


@pytest.fixture()
def oracle_server():
    target = random_dense(DIMS, 5)
    rng = np.random.default_rng(6)
    coords = np.argwhere(rng.random(DIMS.grid_shape) < 0.1)
    slat_target = init_sparse_noise(coords, DIMS, seed=7)
    provider = GlobalOracleProvider(ss_target=target, slat_target=slat_target)
    server = ProviderServer(provider, DIMS).start()
    yield server, target, slat_target
    server.stop()


class TestRemoteProvider:
    def test_zero_echo_server(self):
        server = ProviderServer(ZeroFieldProvider(), DIMS).start()
        try:
            with RemoteProvider(server.address, timeout=10) as remote:
                Z = random_dense(DIMS, 8)
                grid = make_patch_grid(DIMS, 2, DIMS.N)
                out = extended_field(Z, 0.5, grid, remote, OracleConditioner())
                assert np.all(out.data == 0)
        finally:
            server.stop()

    def test_loopback_oracle_matches_in_process_bitwise(self, oracle_server):
        server, target, slat_target = oracle_server
        local = GlobalOracleProvider(ss_target=target, slat_target=slat_target)
        Z = random_dense(DIMS, 9)
        grid = make_patch_grid(DIMS, 2, DIMS.N)
        with RemoteProvider(server.address, timeout=10) as remote:
            a = extended_field(Z, 0.7, grid, remote, OracleConditioner())
        b = extended_field(Z, 0.7, grid, local, OracleConditioner())
        assert np.array_equal(a.data.view(np.uint32), b.data.view(np.uint32))

    def test_sparse_loopback_matches(self, oracle_server):
        server, _, slat_target = oracle_server
        local = GlobalOracleProvider(slat_target=slat_target)
        Z = slat_target.with_features(np.float32(0.5) * slat_target.features + 1)
        grid = make_patch_grid(DIMS, 2, DIMS.M)
        with RemoteProvider(server.address, timeout=10) as remote:
            a = extended_field(Z, 0.4, grid, remote, OracleConditioner())
        b = extended_field(Z, 0.4, grid, local, OracleConditioner())
        assert np.array_equal(a.coords, b.coords)
        assert np.array_equal(a.features.view(np.uint32), b.features.view(np.uint32))

    def test_many_concurrent_requests(self, oracle_server):
        server, target, _ = oracle_server
        cond = OracleConditioner().window_condition(
            make_patch_grid(DIMS, 2, DIMS.N).window(0, 0)
        )
        with RemoteProvider(server.address, timeout=30) as remote:
            patches = [random_dense(DIMS.patch_dims(), 100 + i) for i in range(100)]
            results = [None] * 100

            def work(i):
                results[i] = remote.evaluate(patches[i], cond, 0.5)

            threads = [threading.Thread(target=work, args=(i,)) for i in range(100)]
            for th in threads:
                th.start()
            for th in threads:
                th.join()
            sub = target.data[:4, :4, :4]
            for i, out in enumerate(results):
                expected = (patches[i].data - sub) / np.float32(0.5)
                assert np.array_equal(out.data, expected)

    def test_error_frame_for_bad_request_connection_survives(self, oracle_server):
        server, _, _ = oracle_server
        sock = socket.create_connection(tuple(server.address.rsplit(":", 1)) if False else ("127.0.0.1", int(server.address.rsplit(":", 1)[1])))
        try:
            sock.sendall(encode_frame(Frame(TYPE_REQUEST, 42, b"not an eval request")))
            frame = _read_one_frame(sock)
            assert frame.type == TYPE_ERROR
            assert frame.request_id == 42
            # the same connection still answers a valid request
            patch = random_dense(DIMS.patch_dims(), 11)
            cond = OracleConditioner().window_condition(
                make_patch_grid(DIMS, 2, DIMS.N).window(0, 0)
            )
            req = EvalRequest(0.5, 1, patch.data.shape, cond.data, patch.data.tobytes())
            sock.sendall(encode_frame(Frame(TYPE_REQUEST, 43, encode_eval_request(req))))
            reply = _read_one_frame(sock)
            assert reply.type == TYPE_RESPONSE
            assert reply.request_id == 43
        finally:
            sock.close()

    def test_server_closing_mid_stream_raises_provider_error(self):
        class Hanging(VectorFieldProvider):
            def evaluate(self, patch, condition, t):
                time.sleep(5)
                return patch

        server = ProviderServer(Hanging(), DIMS).start()
        remote = RemoteProvider(server.address, timeout=20)
        patch = random_dense(DIMS.patch_dims(), 12)
        result = {}

        def work():
            try:
                remote.evaluate(patch, ConditionEmbedding(b""), 0.5)
            except ProviderError as exc:
                result["error"] = exc

        th = threading.Thread(target=work)
        th.start()
        time.sleep(0.3)
        server.stop()
        th.join(timeout=10)
        assert "error" in result
        remote.close()

    def test_timeout(self):
        class Sleepy(VectorFieldProvider):
            def evaluate(self, patch, condition, t):
                time.sleep(2)
                return patch

        server = ProviderServer(Sleepy(), DIMS).start()
        try:
            remote = RemoteProvider(server.address, timeout=0.2)
            with pytest.raises(ProviderError, match="timeout"):
                remote.evaluate(random_dense(DIMS.patch_dims(), 13), ConditionEmbedding(b""), 0.5)
            remote.close()
        finally:
            server.stop()

    def test_idle_connection_survives(self, oracle_server):
        server, _, _ = oracle_server
        with RemoteProvider(server.address, timeout=10) as remote:
            patch = random_dense(DIMS.patch_dims(), 14)
            cond = OracleConditioner().window_condition(
                make_patch_grid(DIMS, 2, DIMS.N).window(0, 0)
            )
            remote.evaluate(patch, cond, 0.5)
            time.sleep(0.5)  # idle, then reuse
            remote.evaluate(patch, cond, 0.5)

    def test_preconnected_socket_transport(self, oracle_server):
        # the client also accepts an already-open byte stream
        server, target, _ = oracle_server
        host, port = server.address.rsplit(":", 1)
        sock = socket.create_connection((host, int(port)))
        with RemoteProvider(sock, timeout=10) as remote:
            patch = random_dense(DIMS.patch_dims(), 15)
            cond = OracleConditioner().window_condition(
                make_patch_grid(DIMS, 2, DIMS.N).window(0, 0)
            )
            out = remote.evaluate(patch, cond, 0.5)
            expected = (patch.data - target.data[:4, :4, :4]) / np.float32(0.5)
            assert np.array_equal(out.data, expected)


class TestConfigDrivenRemote:
    def test_build_provider_connects_and_runs(self, oracle_server, tmp_path):
        from tiledflow.fixtures import build_demo_scene
        from tiledflow.optim import AdamParams
        from tiledflow.pipeline import PipelineConfig, build_provider, generate_sparse_structure

        server, _, _ = oracle_server
        # rebuild a server around the demo scene's targets so the remote
        # oracle matches the prior being completed
        scene = build_demo_scene(DIMS)
        demo_server = ProviderServer(
            GlobalOracleProvider(ss_target=scene.ss_target, slat_target=scene.slat_target),
            DIMS,
        ).start()
        try:
            config = PipelineConfig(
                dims=DIMS,
                d=2,
                schedule_steps=6,
                n_iter=1,
                ss_adam=AdamParams(steps=0),
                slat_adam=AdamParams(steps=0),
                provider=f"remote:{demo_server.address}",
            )
            bundle = build_provider(config)
            try:
                coords = generate_sparse_structure(scene.prior, config, bundle)
            finally:
                bundle.close()
            assert np.array_equal(coords, scene.occ_target.coords())
        finally:
            demo_server.stop()


def _read_one_frame(sock):
    buf = b""
    while True:
        chunk = sock.recv(65536)
        if not chunk:
            raise ConnectionError("peer closed")
        buf += chunk
        try:
            frame, _ = decode_frame(buf)
            return frame
        except IncompleteFrameError:
            continue


class TestServerFuzz:
    def test_random_and_mutated_frames_never_crash(self, oracle_server):
        server, target, _ = oracle_server
        rng = np.random.default_rng(20)
        host, port = server.address.rsplit(":", 1)
        address = (host, int(port))

        patch = random_dense(DIMS.patch_dims(), 21)
        cond = OracleConditioner().window_condition(
            make_patch_grid(DIMS, 2, DIMS.N).window(0, 0)
        )
        valid = encode_frame(
            Frame(TYPE_REQUEST, 1, encode_eval_request(
                EvalRequest(0.5, 1, patch.data.shape, cond.data, patch.data.tobytes())
            ))
        )

        def exchange(blob):
            sock = socket.create_connection(address)
            sock.settimeout(5)
            try:
                sock.sendall(blob)
                sock.shutdown(socket.SHUT_WR)  # EOF so truncated frames resolve fast
                try:
                    return _read_one_frame(sock)
                except (socket.timeout, ConnectionError, OSError):
                    return None
            finally:
                sock.close()

        error_frames = 0
        # 1000 random byte blobs
        for _ in range(1000):
            blob = rng.bytes(int(rng.integers(1, 120)))
            reply = exchange(blob)
            if reply is not None:
                assert reply.type == TYPE_ERROR
                error_frames += 1
        # 1000 single-byte mutations of a valid frame
        for _ in range(1000):
            blob = bytearray(valid)
            pos = int(rng.integers(0, len(blob)))
            blob[pos] = int(rng.integers(0, 256))
            reply = exchange(bytes(blob))
            if reply is not None and reply.type == TYPE_ERROR:
                error_frames += 1
        assert error_frames > 0
        # the server is still healthy afterwards
        reply = exchange(valid)
        assert reply is not None and reply.type == TYPE_RESPONSE
