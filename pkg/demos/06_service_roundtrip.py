"""The HTTP API exercised headlessly: sessions, prompts, composites.

Uses the in-process test client; `mattekit serve --port 8000 --checkpoint ...`
exposes the same app over a socket for the browser UI under frontend/.
"""

import base64
import io as pyio

import numpy as np
from fastapi.testclient import TestClient
from PIL import Image

from mattekit import autodiff as ad
from mattekit.checkpoint import Checkpoint
from mattekit.guidance import encoder_init
from mattekit.imageops import AlphaMatte, ImageRGB, composite
from mattekit.m2m import M2MConfig, m2m_init
from mattekit.service import create_app

size = 64
yy, xx = np.mgrid[:size, :size]
dist = np.sqrt((yy - 30.0) ** 2 + (xx - 34.0) ** 2)
alpha = AlphaMatte(np.clip((14 - dist) / 2 + 0.5, 0, 1).astype(np.float32))
fg = ImageRGB(np.broadcast_to(np.array([0.85, 0.7, 0.2], np.float32)[:, None, None],
                              (3, size, size)).copy())
bg = ImageRGB(np.broadcast_to(np.array([0.1, 0.1, 0.3], np.float32)[:, None, None],
                              (3, size, size)).copy())
scene = composite(fg, bg, alpha)
buf = pyio.BytesIO()
Image.fromarray(np.round(scene.planes.transpose(1, 2, 0) * 255)
                .astype(np.uint8), "RGB").save(buf, format="PNG")

cfg = M2MConfig.toy(feature_channels=8, seed=2)
checkpoint = Checkpoint(encoder=encoder_init(channels=8, seed=2),
                        m2m=m2m_init(cfg), adam=ad.AdamState(), iteration=0,
                        config={"m2m": cfg.to_dict(), "encoder_channels": 8,
                                "encoder_seed": 2})

app = create_app(checkpoint, target=64)
with TestClient(app) as client:
    meta = client.post("/v1/sessions", content=buf.getvalue()).json()
    print(f"session {meta['id'][:8]}…: {meta['width']}x{meta['height']}, "
          f"{meta['n_candidates']} candidates ({meta['candidate_source']})")

    prompt = {"kind": "box", "box": {"x0": 14, "y0": 12, "x1": 52, "y1": 48}}
    result = client.post(f"/v1/sessions/{meta['id']}/matte", json=prompt).json()
    print(f"matte result #{result['result']} from candidate "
          f"{result['candidate_id']} in {result['timing_ms']:.1f} ms")

    matte_png = base64.b64decode(result["matte_png"])
    with Image.open(pyio.BytesIO(matte_png)) as im:
        print(f"embedded matte PNG: {im.size} {im.mode}")

    again = client.post(f"/v1/sessions/{meta['id']}/matte", json=prompt).json()
    print(f"repeat prompt byte-identical: {again['matte_png'] == result['matte_png']}")

    for bg_kind in ("white", "black", "checker"):
        r = client.get(f"/v1/sessions/{meta['id']}/results/0/composite"
                       f"?bg={bg_kind}")
        print(f"composite over {bg_kind}: {r.status_code}, "
              f"{len(r.content)} bytes")

    bad = client.post(f"/v1/sessions/{meta['id']}/matte",
                      json={"kind": "point", "point": {"x": 999, "y": 0}})
    print(f"out-of-bounds point -> {bad.status_code}: {bad.json()['error']}")
