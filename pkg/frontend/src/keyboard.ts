/**
 * One-hand steering bindings.
 *
 * Translation: arrow keys move in-plane (left/right = x, up/down = y),
 * PageUp/PageDown move along z. Rotation: W/S about x, A/D about y,
 * Q/E about z. Magnitudes come from the adjustable step-size settings.
 */

import { Delta, Vec3 } from "./protocol.js";

const ZERO: Vec3 = [0, 0, 0];

export function deltaForKey(key: string, stepTransMm: number, stepRotRad: number): Delta | null {
  const t = (x: number, y: number, z: number): Delta => ({
    dt_mm: [x * stepTransMm, y * stepTransMm, z * stepTransMm],
    dr_rad: ZERO,
  });
  const r = (x: number, y: number, z: number): Delta => ({
    dt_mm: ZERO,
    dr_rad: [x * stepRotRad, y * stepRotRad, z * stepRotRad],
  });
  switch (key) {
    case "ArrowRight":
      return t(1, 0, 0);
    case "ArrowLeft":
      return t(-1, 0, 0);
    case "ArrowUp":
      return t(0, 1, 0);
    case "ArrowDown":
      return t(0, -1, 0);
    case "PageUp":
      return t(0, 0, 1);
    case "PageDown":
      return t(0, 0, -1);
    case "w":
    case "W":
      return r(1, 0, 0);
    case "s":
    case "S":
      return r(-1, 0, 0);
    case "a":
    case "A":
      return r(0, 1, 0);
    case "d":
    case "D":
      return r(0, -1, 0);
    case "q":
    case "Q":
      return r(0, 0, 1);
    case "e":
    case "E":
      return r(0, 0, -1);
    default:
      return null;
  }
}
