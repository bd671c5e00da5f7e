/**
 * Minimal image loading: PNG (via pngjs) and binary PPM/PGM (P6/P5).
 * Images come back as grayscale [0,1] row-major.
 */

import { promises as fs } from 'fs'
import { PNG } from 'pngjs'

export interface GrayImage {
  width: number
  height: number
  pixels: Float32Array
}

export const SUPPORTED_EXTENSIONS = ['.png', '.ppm', '.pgm']

function parseNetpbmHeader(buf: Buffer): { magic: string; width: number; height: number; maxval: number; offset: number } {
  // header tokens separated by whitespace; '#' starts a comment to EOL
  let pos = 0
  const tokens: string[] = []
  while (tokens.length < 4 && pos < buf.length) {
    const ch = String.fromCharCode(buf[pos])
    if (ch === '#') {
      while (pos < buf.length && buf[pos] !== 0x0a) pos++
      pos++
    } else if (/\s/.test(ch)) {
      pos++
    } else {
      let tok = ''
      while (pos < buf.length && !/\s/.test(String.fromCharCode(buf[pos]))) {
        tok += String.fromCharCode(buf[pos])
        pos++
      }
      tokens.push(tok)
    }
  }
  if (tokens.length < 4) throw new Error('truncated netpbm header')
  pos++ // single whitespace after maxval
  return {
    magic: tokens[0],
    width: parseInt(tokens[1], 10),
    height: parseInt(tokens[2], 10),
    maxval: parseInt(tokens[3], 10),
    offset: pos,
  }
}

function decodeNetpbm(buf: Buffer): GrayImage {
  const { magic, width, height, maxval, offset } = parseNetpbmHeader(buf)
  if (magic !== 'P5' && magic !== 'P6') {
    throw new Error(`unsupported netpbm magic ${magic} (binary P5/P6 only)`)
  }
  if (maxval !== 255) throw new Error(`unsupported maxval ${maxval}`)
  const channels = magic === 'P6' ? 3 : 1
  const needed = width * height * channels
  if (buf.length < offset + needed) throw new Error('truncated netpbm payload')
  const pixels = new Float32Array(width * height)
  for (let i = 0; i < width * height; i++) {
    if (channels === 1) {
      pixels[i] = buf[offset + i] / 255
    } else {
      const r = buf[offset + i * 3]
      const g = buf[offset + i * 3 + 1]
      const b = buf[offset + i * 3 + 2]
      pixels[i] = (0.299 * r + 0.587 * g + 0.114 * b) / 255
    }
  }
  return { width, height, pixels }
}

function decodePng(buf: Buffer): GrayImage {
  const png = PNG.sync.read(buf)
  const pixels = new Float32Array(png.width * png.height)
  for (let i = 0; i < png.width * png.height; i++) {
    const r = png.data[i * 4]
    const g = png.data[i * 4 + 1]
    const b = png.data[i * 4 + 2]
    pixels[i] = (0.299 * r + 0.587 * g + 0.114 * b) / 255
  }
  return { width: png.width, height: png.height, pixels }
}

export async function loadGrayImage(filePath: string): Promise<GrayImage> {
  const buf = await fs.readFile(filePath)
  if (filePath.endsWith('.png')) return decodePng(buf)
  if (filePath.endsWith('.ppm') || filePath.endsWith('.pgm')) return decodeNetpbm(buf)
  throw new Error(`unsupported image type: ${filePath}`)
}

/** Box-average resample to a fixed square grid. */
export function resampleToGrid(image: GrayImage, grid: number): Float32Array {
  const out = new Float32Array(grid * grid)
  for (let gy = 0; gy < grid; gy++) {
    for (let gx = 0; gx < grid; gx++) {
      const x0 = Math.floor((gx * image.width) / grid)
      const x1 = Math.max(x0 + 1, Math.floor(((gx + 1) * image.width) / grid))
      const y0 = Math.floor((gy * image.height) / grid)
      const y1 = Math.max(y0 + 1, Math.floor(((gy + 1) * image.height) / grid))
      let sum = 0
      for (let y = y0; y < y1; y++) {
        for (let x = x0; x < x1; x++) {
          sum += image.pixels[y * image.width + x]
        }
      }
      out[gy * grid + gx] = sum / ((x1 - x0) * (y1 - y0))
    }
  }
  return out
}
