/**
 * Embedding backends.
 *
 * "pixel": deterministic, dependency-free desk-scale embedding — box-resample
 * to a 16x16 grid, center, L2-normalize (256-dim). Good enough to exercise
 * the engine end to end; not a semantic feature.
 *
 * "tfjs": runs a converted pretrained vision transformer (or any graph model
 * with a single pooled output) through @tensorflow/tfjs when that package and
 * a model artifact are available. This is the bridge to pretrained semantic features;
 * it is never required by the test suite.
 */

import { GrayImage, resampleToGrid } from './image.js'

export interface Embedder {
  dim: number
  name: string
  embed(image: GrayImage): Promise<Float32Array>
}

export const PIXEL_GRID = 16

export function pixelEmbedder(): Embedder {
  const dim = PIXEL_GRID * PIXEL_GRID
  return {
    dim,
    name: `pixel-${PIXEL_GRID}x${PIXEL_GRID}`,
    async embed(image: GrayImage): Promise<Float32Array> {
      const grid = resampleToGrid(image, PIXEL_GRID)
      let mean = 0
      for (const v of grid) mean += v
      mean /= dim
      let sq = 0
      for (let i = 0; i < dim; i++) {
        grid[i] -= mean
        sq += grid[i] * grid[i]
      }
      const norm = Math.sqrt(sq)
      if (!(norm > 0)) {
        // perfectly flat image: fall back to a fixed unit vector
        grid.fill(0)
        grid[0] = 1
        return grid
      }
      for (let i = 0; i < dim; i++) grid[i] /= norm
      return grid
    },
  }
}

export interface TfjsOptions {
  modelPath: string
  inputSize?: number
}

export async function tfjsEmbedder(options: TfjsOptions): Promise<Embedder> {
  // typed loosely: the package is an optional peer and may be absent
  let tf: any
  try {
    tf = await import('@tensorflow/tfjs' as string)
  } catch {
    throw new Error(
      'backend "tfjs" needs @tensorflow/tfjs installed (npm install @tensorflow/tfjs)',
    )
  }
  const size = options.inputSize ?? 224
  const model = await tf.loadGraphModel(options.modelPath)
  const self: Embedder = {
    dim: -1, // discovered on first embed
    name: `tfjs:${options.modelPath}`,
    async embed(image: GrayImage): Promise<Float32Array> {
      const out = tf.tidy(() => {
        const gray = tf.tensor3d(image.pixels, [image.height, image.width, 1])
        const rgb = tf.image.resizeBilinear(gray.concat([gray, gray], 2), [size, size])
        return model.predict(rgb.expandDims(0)).squeeze()
      })
      const data = (await out.data()) as Float32Array
      out.dispose()
      const vec = new Float32Array(data)
      let sq = 0
      for (const v of vec) sq += v * v
      const norm = Math.sqrt(sq)
      for (let i = 0; i < vec.length; i++) vec[i] /= norm
      self.dim = vec.length
      return vec
    },
  }
  return self
}

export async function makeEmbedder(backend: string, modelPath?: string): Promise<Embedder> {
  if (backend === 'pixel') return pixelEmbedder()
  if (backend === 'tfjs') {
    if (!modelPath) throw new Error('backend "tfjs" requires --model <path or url>')
    return tfjsEmbedder({ modelPath })
  }
  throw new Error(`unknown backend ${backend} (expected "pixel" or "tfjs")`)
}
