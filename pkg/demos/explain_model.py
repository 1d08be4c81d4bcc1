"""Where does a trained classifier look, and how do the domains sit in its embedding?

Trains a short source-only model, then:

* renders Grad-CAM heatmaps for a few source test images next to the
  generator's ground-truth blob mask and reports how often the heat
  concentrates on the cells;
* embeds the pooled source + ``t_contrast`` test sets with exact t-SNE and
  writes a scatter image coloured by domain.

    python demos/explain_model.py --epochs 15 --out /tmp/explain
"""
import argparse
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from microdann.evaluation import cam_localization, grad_cam, predictions
from microdann.experiments import make_benchmark, pooled_embeddings, run_mode
from microdann.tsne import tsne

DOMAIN_COLOURS = [(31, 119, 180), (214, 39, 40), (44, 160, 44)]


def to_uint8(a):
    a = np.asarray(a, dtype=float)
    span = a.max() - a.min()
    return np.uint8(255 * (a - a.min()) / span) if span > 0 else np.zeros(a.shape, np.uint8)


def cam_strip(samples, cams, scale=4):
    """Image | heatmap | mask, one row per sample."""
    rows = []
    for s, cam in zip(samples, cams):
        tiles = [to_uint8(s.pixels), to_uint8(cam.values), to_uint8(s.mask)]
        rows.append(np.hstack(tiles))
    img = Image.fromarray(np.vstack(rows), mode="L")
    return img.resize((img.width * scale, img.height * scale), Image.NEAREST)


def scatter(coords, domains, size=480, pad=12):
    img = Image.new("RGB", (size, size), "white")
    draw = ImageDraw.Draw(img)
    lo, hi = coords.min(axis=0), coords.max(axis=0)
    xy = pad + (coords - lo) / np.maximum(hi - lo, 1e-12) * (size - 2 * pad)
    for (x, y), d in zip(xy, domains):
        draw.ellipse((x - 3, y - 3, x + 3, y + 3), fill=DOMAIN_COLOURS[int(d) % len(DOMAIN_COLOURS)])
    return img


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--epochs", type=int, default=15)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", type=Path, default=Path("explain_demo"))
    args = parser.parse_args()
    args.out.mkdir(parents=True, exist_ok=True)

    bench = make_benchmark(["t_contrast"], seed=args.seed)
    report = run_mode(bench, "source_only", seed=args.seed, epochs=args.epochs)
    params = report.fit.params
    print(f"source accuracy {report.source_accuracy:.3f}, t_contrast {report.target_accuracy['t_contrast']:.3f}")

    test = bench.source_test
    preds = predictions(params, test)
    correct = [s for s, p in zip(test, preds) if p == s.class_label]
    cams = [grad_cam(params, s, s.class_label) for s in correct]
    inside = sum(a > b for a, b in (cam_localization(c, s.mask) for s, c in zip(correct, cams)))
    print(f"Grad-CAM heat mostly on the cells for {inside}/{len(correct)} correctly classified images")
    cam_strip(correct[:6], cams[:6]).save(args.out / "gradcam.png")

    emb, dom = pooled_embeddings(params, bench)
    res = tsne(emb, perplexity=30, iterations=1000, seed=args.seed)
    print(f"t-SNE over {len(emb)} points: KL {res.kl_initial:.3f} -> {res.kl_final:.3f}")
    scatter(res.coords, dom).save(args.out / "tsne.png")
    print(f"wrote {args.out / 'gradcam.png'} and {args.out / 'tsne.png'} (blue = source, red = t_contrast)")


if __name__ == "__main__":
    main()
