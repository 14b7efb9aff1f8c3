"""File formats.

Scene container ("MSCN1"):
    ASCII header, one `key value...` pair per line, terminated by a line
    reading `end_header`. Keys: magic, num_gaussians, num_clusters,
    num_bases, num_frames, num_cameras, image_size (W H). The header is
    followed by little-endian binary arrays in this order:

        mu0            (N, 3)  float32
        rot0           (N, 4)  float32   (w, x, y, z)
        log_scale      (N, 3)  float32
        opacity_logit  (N,)    float32
        color          (N, 3)  float32
        cluster_id     (N,)    int32     (-1 = unassigned)
        kind           (N,)    int32     (0 static, 1 dynamic, 2 shadow)
        coeff_logits   (N, B)  float32
        per cluster, in id order:
            global_rot   (T, 4)    float32
            global_trans (T, 3)    float32
            bases_r6     (T, B, 6) float32
            bases_t      (T, B, 3) float32
        intrinsics     (C, 3, 3) float64
        extrinsics     (C, 4, 4) float64

    Cameras are stored at float64 so extrinsic orthonormality survives a
    round trip.

Prior container ("MSPB1"): header keys magic, num_frames, image_size,
num_pairs; then depth (T, H, W) float32, fg_mask and shadow_mask (T, H, W)
uint8, and per track pair: a line-less binary record of int32 header
(t, t', P) followed by point_id (P,) int32, query_px (P, 2) float32,
target_uv (P, 2) float32, visible (P,) uint8.

Checkpoint ("MSCK1"): header keys magic, scene_bytes, num_moments; the
embedded MSCN1 blob, then named float64 optimizer-moment arrays.

Plus: binary PPM (P6) images, 16-bit PGM depth maps (with a `# scale`
comment giving units per gray level), per-frame ASCII PLY point clouds,
and cameras JSON.
"""

from __future__ import annotations

import json

import numpy as np

from .errors import ContainerFormatError
from .model import (CameraSet, ClusterMotion, PriorBundle, SceneModel,
                    TrackSet)


def _write_header(f, fields: dict):
    for k, v in fields.items():
        if isinstance(v, (tuple, list, np.ndarray)):
            v = " ".join(str(x) for x in v)
        f.write(f"{k} {v}\n".encode("ascii"))
    f.write(b"end_header\n")


def _read_header(f, magic: str) -> dict:
    fields = {}
    while True:
        line = b""
        while not line.endswith(b"\n"):
            ch = f.read(1)
            if not ch:
                raise ContainerFormatError("truncated header")
            line += ch
        parts = line.decode("ascii").split()
        if parts == ["end_header"]:
            break
        if not fields and (parts[0] != "magic" or parts[1] != magic):
            raise ContainerFormatError(
                f"bad magic: expected {magic}, got {' '.join(parts[:2])}")
        fields[parts[0]] = parts[1:] if len(parts) > 2 else parts[1]
    return fields


def _read_array(f, dtype, shape):
    n = int(np.prod(shape))
    buf = f.read(n * np.dtype(dtype).itemsize)
    if len(buf) != n * np.dtype(dtype).itemsize:
        raise ContainerFormatError("truncated array data")
    return np.frombuffer(buf, dtype=dtype).reshape(shape).copy()


def save_scene(scene: SceneModel, path: str):
    with open(path, "wb") as f:
        _write_header(f, {
            "magic": "MSCN1",
            "num_gaussians": scene.num_gaussians,
            "num_clusters": scene.num_clusters,
            "num_bases": scene.num_bases,
            "num_frames": scene.num_frames,
            "num_cameras": scene.cameras.num_frames,
            "image_size": scene.image_size,
        })
        le = "<"
        for a, dt in ((scene.mu0, "f4"), (scene.rot0, "f4"),
                      (scene.log_scale, "f4"), (scene.opacity_logit, "f4"),
                      (scene.color, "f4"), (scene.cluster_id, "i4"),
                      (scene.kind, "i4"), (scene.coeff_logits, "f4")):
            f.write(np.ascontiguousarray(a, dtype=le + dt).tobytes())
        for cm in scene.clusters:
            for a in (cm.global_rot, cm.global_trans, cm.bases_r6, cm.bases_t):
                f.write(np.ascontiguousarray(a, dtype="<f4").tobytes())
        f.write(np.ascontiguousarray(scene.cameras.intrinsics, "<f8").tobytes())
        f.write(np.ascontiguousarray(scene.cameras.extrinsics, "<f8").tobytes())


def load_scene(path: str) -> SceneModel:
    with open(path, "rb") as f:
        h = _read_header(f, "MSCN1")
        n = int(h["num_gaussians"])
        K = int(h["num_clusters"])
        B = int(h["num_bases"])
        T = int(h["num_frames"])
        C = int(h["num_cameras"])
        W, H = (int(x) for x in h["image_size"])
        mu0 = _read_array(f, "<f4", (n, 3)).astype(np.float64)
        rot0 = _read_array(f, "<f4", (n, 4)).astype(np.float64)
        log_scale = _read_array(f, "<f4", (n, 3)).astype(np.float64)
        opl = _read_array(f, "<f4", (n,)).astype(np.float64)
        color = _read_array(f, "<f4", (n, 3)).astype(np.float64)
        cid = _read_array(f, "<i4", (n,)).astype(np.int32)
        kind = _read_array(f, "<i4", (n,)).astype(np.int8)
        coeff = _read_array(f, "<f4", (n, B)).astype(np.float64)
        clusters = []
        for k in range(K):
            gr = _read_array(f, "<f4", (T, 4)).astype(np.float64)
            gt = _read_array(f, "<f4", (T, 3)).astype(np.float64)
            br = _read_array(f, "<f4", (T, B, 6)).astype(np.float64)
            bt = _read_array(f, "<f4", (T, B, 3)).astype(np.float64)
            gr /= np.linalg.norm(gr, axis=1, keepdims=True)
            clusters.append(ClusterMotion(cluster_id=k, global_rot=gr,
                                          global_trans=gt, bases_r6=br,
                                          bases_t=bt))
        intr = _read_array(f, "<f8", (C, 3, 3))
        extr = _read_array(f, "<f8", (C, 4, 4))
    rot0 /= np.linalg.norm(rot0, axis=1, keepdims=True)
    return SceneModel(mu0=mu0, rot0=rot0, log_scale=log_scale,
                      opacity_logit=opl, color=color, kind=kind,
                      cluster_id=cid, coeff_logits=coeff, clusters=clusters,
                      cameras=CameraSet(intr, extr), image_size=(W, H),
                      num_frames=T)


def save_priors(priors: PriorBundle, path: str):
    T, H, W = priors.depth.shape
    with open(path, "wb") as f:
        _write_header(f, {
            "magic": "MSPB1",
            "num_frames": T,
            "image_size": (W, H),
            "num_pairs": len(priors.tracks),
        })
        f.write(np.ascontiguousarray(priors.depth, "<f4").tobytes())
        f.write(np.ascontiguousarray(priors.fg_mask, "u1").tobytes())
        f.write(np.ascontiguousarray(priors.shadow_mask, "u1").tobytes())
        for (t, tp) in sorted(priors.tracks):
            ts = priors.tracks[(t, tp)]
            P = len(ts.point_id)
            f.write(np.array([t, tp, P], "<i4").tobytes())
            f.write(np.ascontiguousarray(ts.point_id, "<i4").tobytes())
            f.write(np.ascontiguousarray(ts.query_px, "<f4").tobytes())
            f.write(np.ascontiguousarray(ts.target_uv, "<f4").tobytes())
            f.write(np.ascontiguousarray(ts.visible, "u1").tobytes())


def load_priors(path: str) -> PriorBundle:
    with open(path, "rb") as f:
        h = _read_header(f, "MSPB1")
        T = int(h["num_frames"])
        W, H = (int(x) for x in h["image_size"])
        npairs = int(h["num_pairs"])
        depth = _read_array(f, "<f4", (T, H, W)).astype(np.float64)
        fg = _read_array(f, "u1", (T, H, W)).astype(bool)
        sh = _read_array(f, "u1", (T, H, W)).astype(bool)
        tracks = {}
        for _ in range(npairs):
            t, tp, P = _read_array(f, "<i4", (3,))
            pid = _read_array(f, "<i4", (P,))
            qpx = _read_array(f, "<f4", (P, 2)).astype(np.float64)
            uv = _read_array(f, "<f4", (P, 2)).astype(np.float64)
            vis = _read_array(f, "u1", (P,)).astype(bool)
            tracks[(int(t), int(tp))] = TrackSet(point_id=pid, query_px=qpx,
                                                 target_uv=uv, visible=vis)
    return PriorBundle(depth=depth, fg_mask=fg, shadow_mask=sh, tracks=tracks)


def save_checkpoint(scene: SceneModel, moments: dict, path: str):
    """Scene plus named optimizer-moment arrays (float64)."""
    import io
    buf = io.BytesIO()
    tmp = path + ".scene.tmp"
    save_scene(scene, tmp)
    with open(tmp, "rb") as f:
        blob = f.read()
    import os
    os.remove(tmp)
    with open(path, "wb") as f:
        _write_header(f, {"magic": "MSCK1", "scene_bytes": len(blob),
                          "num_moments": len(moments)})
        f.write(blob)
        for name in sorted(moments):
            a = np.ascontiguousarray(moments[name], "<f8")
            meta = json.dumps({"name": name, "shape": list(a.shape)})
            mb = meta.encode("ascii")
            f.write(np.array([len(mb)], "<i4").tobytes())
            f.write(mb)
            f.write(a.tobytes())


def load_checkpoint(path: str) -> tuple:
    with open(path, "rb") as f:
        h = _read_header(f, "MSCK1")
        blob = f.read(int(h["scene_bytes"]))
        import io, tempfile, os
        fd, tmp = tempfile.mkstemp(suffix=".mscn")
        with os.fdopen(fd, "wb") as g:
            g.write(blob)
        scene = load_scene(tmp)
        os.remove(tmp)
        moments = {}
        for _ in range(int(h["num_moments"])):
            (mlen,) = _read_array(f, "<i4", (1,))
            meta = json.loads(f.read(int(mlen)).decode("ascii"))
            moments[meta["name"]] = _read_array(f, "<f8", tuple(meta["shape"]))
    return scene, moments


def save_ppm(img: np.ndarray, path: str):
    """(H, W, 3) floats in [0,1] -> binary PPM (P6), 8 bits per channel."""
    arr = np.clip(np.asarray(img, float), 0, 1)
    b = (arr * 255.0 + 0.5).astype(np.uint8)
    H, W = b.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{W} {H}\n255\n".encode("ascii"))
        f.write(b.tobytes())


def load_ppm(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        if f.readline().strip() != b"P6":
            raise ContainerFormatError("not a P6 PPM")
        dims = f.readline().split()
        W, H = int(dims[0]), int(dims[1])
        maxv = int(f.readline())
        data = np.frombuffer(f.read(W * H * 3), dtype=np.uint8)
    return data.reshape(H, W, 3).astype(np.float64) / maxv


def save_pgm16(depth: np.ndarray, path: str, scale: float = None):
    """(H, W) depth -> 16-bit PGM; `# scale` comment stores units/gray."""
    d = np.asarray(depth, float)
    if scale is None:
        scale = max(d.max(), 1e-12) / 65535.0
    q = np.clip(d / scale + 0.5, 0, 65535).astype(">u2")
    H, W = d.shape
    with open(path, "wb") as f:
        f.write(f"P5\n# scale {float(scale)!r}\n{W} {H}\n65535\n".encode("ascii"))
        f.write(q.tobytes())


def load_pgm16(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        if f.readline().strip() != b"P5":
            raise ContainerFormatError("not a P5 PGM")
        scale = 1.0
        line = f.readline()
        while line.startswith(b"#"):
            parts = line.decode("ascii").split()
            if len(parts) >= 3 and parts[1] == "scale":
                scale = float(parts[2])
            line = f.readline()
        W, H = (int(x) for x in line.split())
        maxv = int(f.readline())
        if maxv != 65535:
            raise ContainerFormatError("expected 16-bit PGM")
        data = np.frombuffer(f.read(W * H * 2), dtype=">u2")
    return data.reshape(H, W).astype(np.float64) * scale


def export_ply(points: np.ndarray, colors: np.ndarray, path: str):
    """ASCII PLY point cloud with uint8 colors."""
    c = (np.clip(colors, 0, 1) * 255.0 + 0.5).astype(np.uint8)
    with open(path, "w") as f:
        f.write("ply\nformat ascii 1.0\n")
        f.write(f"element vertex {len(points)}\n")
        for ax in "xyz":
            f.write(f"property float {ax}\n")
        for ch in ("red", "green", "blue"):
            f.write(f"property uchar {ch}\n")
        f.write("end_header\n")
        for p, q in zip(points, c):
            f.write(f"{p[0]:.8g} {p[1]:.8g} {p[2]:.8g} {q[0]} {q[1]} {q[2]}\n")


def save_cameras_json(cameras: CameraSet, path: str):
    obj = {"intrinsics": cameras.intrinsics.tolist(),
           "extrinsics": cameras.extrinsics.tolist()}
    with open(path, "w") as f:
        json.dump(obj, f)


def load_cameras_json(path: str) -> CameraSet:
    with open(path) as f:
        obj = json.load(f)
    return CameraSet(np.array(obj["intrinsics"], float),
                     np.array(obj["extrinsics"], float))
