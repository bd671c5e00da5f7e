import { promises as fs } from 'fs'
import * as path from 'path'

export function makePpm(
  width: number,
  height: number,
  shade: (x: number, y: number) => number,
): Buffer {
  const header = Buffer.from(`P6\n${width} ${height}\n255\n`, 'ascii')
  const pixels = Buffer.alloc(width * height * 3)
  for (let y = 0; y < height; y++) {
    for (let x = 0; x < width; x++) {
      const v = Math.max(0, Math.min(255, Math.round(shade(x, y) * 255)))
      const o = (y * width + x) * 3
      pixels[o] = v
      pixels[o + 1] = v
      pixels[o + 2] = v
    }
  }
  return Buffer.concat([header, pixels])
}

/** Class pattern: a bright band whose position encodes the class id. */
export function classShade(classIndex: number, totalClasses: number, imageIndex: number) {
  return (x: number, y: number): number => {
    const band = Math.floor((classIndex * 24) / totalClasses)
    const width = Math.max(2, Math.floor(24 / totalClasses))
    const inBand = x >= band && x < band + width
    const jitter = 0.1 * Math.sin(imageIndex * 3.7 + x * 0.9 + y * 1.3)
    return (inBand ? 0.9 : 0.15) + jitter
  }
}

export async function writeToyDataset(
  root: string,
  classNames: string[],
  imagesPerClass: number,
): Promise<void> {
  for (let c = 0; c < classNames.length; c++) {
    const dir = path.join(root, classNames[c])
    await fs.mkdir(dir, { recursive: true })
    for (let i = 0; i < imagesPerClass; i++) {
      const buf = makePpm(24, 24, classShade(c, classNames.length, i))
      await fs.writeFile(path.join(dir, `img_${String(i).padStart(3, '0')}.ppm`), buf)
    }
  }
}
