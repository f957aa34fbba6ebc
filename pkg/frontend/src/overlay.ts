/** Pixel-level mask compositing, kept DOM-free so it is unit-testable. */

export interface Rgba {
  r: number;
  g: number;
  b: number;
  a: number; // 0..1 blend factor applied where the mask is set
}

export const MASK_OVERLAY: Rgba = { r: 64, g: 160, b: 255, a: 0.5 };
export const INSTANCE_OVERLAY: Rgba = { r: 255, g: 120, b: 40, a: 0.5 };

/**
 * Alpha-blend a binary mask onto RGBA pixel data in place.
 *
 * `base` is canvas-style RGBA (4 bytes/pixel); `mask` holds one byte per
 * pixel, nonzero meaning set. Returns `base` for chaining.
 */
export function blendMask(
  base: Uint8ClampedArray,
  mask: Uint8Array | Uint8ClampedArray,
  color: Rgba = MASK_OVERLAY,
): Uint8ClampedArray {
  if (base.length !== mask.length * 4) {
    throw new Error(
      `pixel count mismatch: base ${base.length / 4} vs mask ${mask.length}`,
    );
  }
  for (let i = 0; i < mask.length; i++) {
    if (!mask[i]) continue;
    const o = i * 4;
    base[o] = base[o] * (1 - color.a) + color.r * color.a;
    base[o + 1] = base[o + 1] * (1 - color.a) + color.g * color.a;
    base[o + 2] = base[o + 2] * (1 - color.a) + color.b * color.a;
    base[o + 3] = 255;
  }
  return base;
}

/** Fraction of set pixels shared by two equal-size binary masks (Dice). */
export function maskDice(
  a: Uint8Array | Uint8ClampedArray,
  b: Uint8Array | Uint8ClampedArray,
): number {
  if (a.length !== b.length) throw new Error("mask size mismatch");
  let inter = 0;
  let total = 0;
  for (let i = 0; i < a.length; i++) {
    const av = a[i] ? 1 : 0;
    const bv = b[i] ? 1 : 0;
    inter += av & bv;
    total += av + bv;
  }
  return total === 0 ? 1 : (2 * inter) / total;
}
