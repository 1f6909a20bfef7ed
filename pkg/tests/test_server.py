import json
import struct
import threading
import urllib.error
import urllib.request

import numpy as np
import pytest

from meshsplat import assets
from meshsplat.binding import init_splats
from meshsplat.render import pose_polygon_frames
from meshsplat.server import make_server
from meshsplat.synthetic import apose, mini_biped
from meshsplat.types import PoseParams


@pytest.fixture(scope="module")
def served_bundle(tmp_path_factory):
    root = tmp_path_factory.mktemp("bundle")
    mesh = mini_biped()
    splats = init_splats(mesh)
    assets.export_viewer_bundle(root, mesh, splats,
                                clips={"idle": [PoseParams.identity(mesh)]},
                                presets={"tpose": PoseParams.identity(mesh),
                                         "apose": apose(mesh)})
    server = make_server(str(root), host="127.0.0.1", port=0)
    port = server.server_address[1]
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield f"http://127.0.0.1:{port}", mesh
    server.shutdown()
    server.server_close()


def get(url):
    with urllib.request.urlopen(url, timeout=5) as resp:
        return resp.status, resp.read(), dict(resp.headers)


class TestServer:
    def test_manifest(self, served_bundle):
        base, mesh = served_bundle
        status, body, headers = get(f"{base}/manifest")
        assert status == 200
        doc = json.loads(body)
        assert doc["polygon_count"] == mesh.num_triangles
        assert headers["Access-Control-Allow-Origin"] == "*"

    def test_asset_download(self, served_bundle):
        base, mesh = served_bundle
        status, body, _ = get(f"{base}/assets/avatar.splat")
        assert status == 200 and body[:8] == assets.SPLAT_MAGIC
        status, body, _ = get(f"{base}/assets/clips/idle.frames")
        assert status == 200 and body[:8] == assets.FRAMES_MAGIC

    def test_missing_asset_404(self, served_bundle):
        base, _ = served_bundle
        with pytest.raises(urllib.error.HTTPError) as err:
            get(f"{base}/assets/nope.bin")
        assert err.value.code == 404

    def test_traversal_blocked(self, served_bundle):
        base, _ = served_bundle
        with pytest.raises(urllib.error.HTTPError) as err:
            get(f"{base}/assets/../../etc/passwd")
        assert err.value.code in (403, 404)

    def test_pose_endpoint_matches_local_frames(self, served_bundle):
        base, mesh = served_bundle
        pose = apose(mesh)
        payload = json.dumps({
            "joint_rotations": [[float(v) for v in row] for row in pose.joint_rotations],
            "root_translation": [0.0, 0.0, 0.0],
        }).encode()
        req = urllib.request.Request(f"{base}/pose", data=payload,
                                     headers={"Content-Type": "application/json"})
        with urllib.request.urlopen(req, timeout=5) as resp:
            body = resp.read()
        assert body[:8] == assets.FRAMES_MAGIC
        version, count, m = struct.unpack("<III", body[8:20])
        assert (version, count, m) == (1, 1, mesh.num_triangles)
        data = np.frombuffer(body[20:], dtype="<f4").reshape(m, 8)
        local = pose_polygon_frames(mesh, pose)
        assert np.allclose(data[:, 0], local.k, atol=1e-6)
        assert np.allclose(data[:, 5:8], local.t, atol=1e-6)

    def test_bad_pose_request_400(self, served_bundle):
        base, _ = served_bundle
        req = urllib.request.Request(f"{base}/pose", data=b'{"joint_rotations": [[0,0,0]]}',
                                     headers={"Content-Type": "application/json"})
        with pytest.raises(urllib.error.HTTPError) as err:
            urllib.request.urlopen(req, timeout=5)
        assert err.value.code == 400

    def test_concurrent_pose_requests(self, served_bundle):
        base, mesh = served_bundle
        payload = json.dumps({
            "joint_rotations": [[0.0, 0.0, 0.0]] * mesh.num_joints,
        }).encode()
        results = []

        def hit():
            req = urllib.request.Request(f"{base}/pose", data=payload)
            with urllib.request.urlopen(req, timeout=10) as resp:
                results.append(resp.status)

        threads = [threading.Thread(target=hit) for _ in range(6)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert results == [200] * 6
