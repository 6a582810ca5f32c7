"""Walk one synthetic night image through enhancement and augmentation.

Writes each stage as PNG and prints a sparsity table per threshold method.

    python demos/enhancement_steps.py out_dir
"""

import sys
from pathlib import Path

from nightatlas import augment, imgproc
from nightatlas.dataio import ARCHETYPES, SynthSpec, synth_city


def main(out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    rgb = synth_city(SynthSpec(3, **ARCHETYPES[1]))
    gray = imgproc.to_grayscale(rgb)
    scaled = imgproc.rescale_intensity(gray)
    imgproc.write_image(out / "0_rgb.png", rgb)
    imgproc.write_image(out / "1_gray.png", gray)
    imgproc.write_image(out / "2_rescaled.png", scaled)

    print(f"{'method':<8}{'T':>5}{'zeros before':>14}{'added':>9}{'sparsity':>10}")
    for method in imgproc.THRESHOLD_METHODS:
        img, rep = imgproc.threshold_image(scaled, method)
        imgproc.write_image(out / f"3_threshold_{method}.png", img)
        print(f"{method:<8}{rep.threshold_value:>5}{rep.zeros_before:>14}{rep.zeros_added:>9}{rep.sparsity:>10.4f}")

    cfg = augment.AugmentConfig(variants_per_image=6, master_seed=11)
    for i, variant in enumerate(augment.augment_reference(rgb, cfg)):
        p = augment.sample_params(cfg.master_seed, i, cfg)
        imgproc.write_image(out / f"4_variant_{i}.png", variant)
        print(f"variant {i}: rot {p.rotation_deg:7.1f}  shift ({p.shift_x_frac:+.2f}, {p.shift_y_frac:+.2f})"
              f"  shear {p.shear:+.2f}  zoom {p.zoom:.2f}  flips {int(p.flip_h)}{int(p.flip_v)}")


if __name__ == "__main__":
    main(Path(sys.argv[1] if len(sys.argv) > 1 else "enhancement_out"))
