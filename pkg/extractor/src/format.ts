/**
 * Binary feature-file and manifest writers matching the engine's format:
 *
 *   bytes 0-3  magic "UCFV"
 *   u32        version (1)
 *   u32        n vectors
 *   u32        d dimension
 *   u8         flags: bit 0 = rows L2-normalized, bit 1 = labels present
 *   3 bytes    padding
 *   n*d f32    row-major payload
 *   n*u32      labels (when flagged)
 *
 * Everything little-endian. A reader lives here too so tests can verify
 * byte-level conformance without the engine.
 */

import { promises as fs } from 'fs'
import * as path from 'path'

export const MAGIC = 'UCFV'
export const VERSION = 1
export const FLAG_NORMALIZED = 0x01
export const FLAG_LABELS = 0x02
const HEADER_BYTES = 20
export const NORM_TOL = 1e-4

export interface FeatureData {
  vectors: Float32Array
  count: number
  dim: number
  labels?: Uint32Array
}

export function l2NormalizeRows(vectors: Float32Array, count: number, dim: number): void {
  for (let i = 0; i < count; i++) {
    let sq = 0
    for (let j = 0; j < dim; j++) {
      const v = vectors[i * dim + j]
      sq += v * v
    }
    const norm = Math.sqrt(sq)
    if (!(norm > 0)) {
      throw new Error(`row ${i} has zero norm and cannot be normalized`)
    }
    for (let j = 0; j < dim; j++) {
      vectors[i * dim + j] /= norm
    }
  }
}

export function rowsNormalized(vectors: Float32Array, count: number, dim: number): boolean {
  for (let i = 0; i < count; i++) {
    let sq = 0
    for (let j = 0; j < dim; j++) {
      const v = vectors[i * dim + j]
      sq += v * v
    }
    if (Math.abs(Math.sqrt(sq) - 1.0) > NORM_TOL) return false
  }
  return true
}

export function encodeFeatureFile(data: FeatureData): Buffer {
  const { vectors, count, dim, labels } = data
  if (count < 1 || dim < 1) {
    throw new Error(`feature block must be non-empty, got ${count}x${dim}`)
  }
  if (vectors.length !== count * dim) {
    throw new Error(`payload length ${vectors.length} != ${count}*${dim}`)
  }
  for (const v of vectors) {
    if (!Number.isFinite(v)) throw new Error('payload contains non-finite entries')
  }
  if (!rowsNormalized(vectors, count, dim)) {
    throw new Error('rows must be L2-normalized before encoding')
  }
  if (labels && labels.length !== count) {
    throw new Error(`labels length ${labels.length} != ${count}`)
  }

  let flags = FLAG_NORMALIZED
  if (labels) flags |= FLAG_LABELS
  const total = HEADER_BYTES + count * dim * 4 + (labels ? count * 4 : 0)
  const buf = Buffer.alloc(total)
  buf.write(MAGIC, 0, 'ascii')
  buf.writeUInt32LE(VERSION, 4)
  buf.writeUInt32LE(count, 8)
  buf.writeUInt32LE(dim, 12)
  buf.writeUInt8(flags, 16)
  let offset = HEADER_BYTES
  for (const v of vectors) {
    buf.writeFloatLE(v, offset)
    offset += 4
  }
  if (labels) {
    for (const l of labels) {
      buf.writeUInt32LE(l, offset)
      offset += 4
    }
  }
  return buf
}

export async function writeFeatureFile(filePath: string, data: FeatureData): Promise<void> {
  await fs.writeFile(filePath, encodeFeatureFile(data))
}

export function decodeFeatureFile(buf: Buffer): FeatureData {
  if (buf.length < HEADER_BYTES) throw new Error('file shorter than header')
  const magic = buf.toString('ascii', 0, 4)
  if (magic !== MAGIC) throw new Error(`bad magic ${JSON.stringify(magic)}`)
  const version = buf.readUInt32LE(4)
  if (version !== VERSION) throw new Error(`unsupported version ${version}`)
  const count = buf.readUInt32LE(8)
  const dim = buf.readUInt32LE(12)
  const flags = buf.readUInt8(16)
  const hasLabels = (flags & FLAG_LABELS) !== 0
  const expected = HEADER_BYTES + count * dim * 4 + (hasLabels ? count * 4 : 0)
  if (buf.length !== expected) {
    throw new Error(`file is ${buf.length} bytes, header declares ${expected}`)
  }
  const vectors = new Float32Array(count * dim)
  let offset = HEADER_BYTES
  for (let i = 0; i < count * dim; i++) {
    vectors[i] = buf.readFloatLE(offset)
    offset += 4
  }
  let labels: Uint32Array | undefined
  if (hasLabels) {
    labels = new Uint32Array(count)
    for (let i = 0; i < count; i++) {
      labels[i] = buf.readUInt32LE(offset)
      offset += 4
    }
  }
  return { vectors, count, dim, labels }
}

export interface ManifestTask {
  train: string
  test: string
  cnum: number
}

export async function writeManifest(
  dir: string,
  dim: number,
  tasks: ManifestTask[],
): Promise<string> {
  const manifestPath = path.join(dir, 'manifest.json')
  const doc = { dim, tasks }
  await fs.writeFile(manifestPath, JSON.stringify(doc, null, 2) + '\n')
  return manifestPath
}
