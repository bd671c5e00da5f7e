/**
 * Folder-to-stream extraction.
 *
 * The dataset layout is one subdirectory per class, images inside. Classes
 * are partitioned into tasks (sorted chunking by default), every class gets
 * a global id in task order, and each task's images are embedded and written
 * as train/test feature files plus a manifest the engine consumes unchanged.
 * Per-class train/test split is deterministic: images are sorted by name and
 * the trailing fraction becomes the test split.
 */

import { promises as fs } from 'fs'
import * as path from 'path'

import { Embedder, makeEmbedder } from './embed.js'
import { SUPPORTED_EXTENSIONS, loadGrayImage } from './image.js'
import { ManifestTask, l2NormalizeRows, writeFeatureFile, writeManifest } from './format.js'
import { partitionClasses } from './partition.js'

export interface ExtractSpec {
  datasetDir: string
  outDir: string
  steps: number
  backend: string
  modelPath?: string
  testFraction: number
  shuffleSeed?: number
}

export interface ExtractResult {
  manifestPath: string
  dim: number
  classIds: Map<string, number>
  tasks: ManifestTask[]
}

async function listClassDirs(datasetDir: string): Promise<string[]> {
  const entries = await fs.readdir(datasetDir, { withFileTypes: true })
  const classes = entries.filter((e) => e.isDirectory()).map((e) => e.name)
  if (classes.length === 0) {
    throw new Error(`no class subdirectories under ${datasetDir}`)
  }
  return classes
}

async function listImages(classDir: string): Promise<string[]> {
  const entries = await fs.readdir(classDir)
  const images = entries
    .filter((name) => SUPPORTED_EXTENSIONS.some((ext) => name.endsWith(ext)))
    .sort()
  if (images.length === 0) {
    throw new Error(`no supported images (${SUPPORTED_EXTENSIONS.join(', ')}) in ${classDir}`)
  }
  return images.map((name) => path.join(classDir, name))
}

async function embedAll(embedder: Embedder, files: string[]): Promise<Float32Array[]> {
  const out: Float32Array[] = []
  for (const file of files) {
    out.push(await embedder.embed(await loadGrayImage(file)))
  }
  return out
}

function pack(rows: Float32Array[], labels: number[]): {
  vectors: Float32Array
  labels: Uint32Array
  count: number
  dim: number
} {
  const count = rows.length
  const dim = rows[0].length
  const vectors = new Float32Array(count * dim)
  rows.forEach((row, i) => {
    if (row.length !== dim) throw new Error('inconsistent embedding dimensions')
    vectors.set(row, i * dim)
  })
  l2NormalizeRows(vectors, count, dim)
  return { vectors, labels: Uint32Array.from(labels), count, dim }
}

export async function extract(spec: ExtractSpec): Promise<ExtractResult> {
  if (spec.testFraction <= 0 || spec.testFraction >= 1) {
    throw new Error(`test fraction must be in (0, 1), got ${spec.testFraction}`)
  }
  const classNames = await listClassDirs(spec.datasetDir)
  const taskClasses = partitionClasses(classNames, {
    steps: spec.steps,
    shuffleSeed: spec.shuffleSeed,
  })
  const classIds = new Map<string, number>()
  for (const group of taskClasses) {
    for (const name of group) classIds.set(name, classIds.size)
  }

  const embedder = await makeEmbedder(spec.backend, spec.modelPath)
  await fs.mkdir(spec.outDir, { recursive: true })
  const written: string[] = []
  try {
    const tasks: ManifestTask[] = []
    let dim = -1
    for (let t = 0; t < taskClasses.length; t++) {
      const trainRows: Float32Array[] = []
      const trainLabels: number[] = []
      const testRows: Float32Array[] = []
      const testLabels: number[] = []
      for (const className of taskClasses[t]) {
        const files = await listImages(path.join(spec.datasetDir, className))
        const testCount = Math.max(1, Math.round(files.length * spec.testFraction))
        if (testCount >= files.length) {
          throw new Error(`class ${className} has too few images to split`)
        }
        const split = files.length - testCount
        const id = classIds.get(className)!
        for (const row of await embedAll(embedder, files.slice(0, split))) {
          trainRows.push(row)
          trainLabels.push(id)
        }
        for (const row of await embedAll(embedder, files.slice(split))) {
          testRows.push(row)
          testLabels.push(id)
        }
      }
      const train = pack(trainRows, trainLabels)
      const test = pack(testRows, testLabels)
      if (dim === -1) dim = train.dim
      if (train.dim !== dim || test.dim !== dim) {
        throw new Error('embedding dimension changed between tasks')
      }
      const trainName = `task${t}_train.ucfv`
      const testName = `task${t}_test.ucfv`
      await writeFeatureFile(path.join(spec.outDir, trainName), train)
      written.push(trainName)
      await writeFeatureFile(path.join(spec.outDir, testName), test)
      written.push(testName)
      tasks.push({ train: trainName, test: testName, cnum: taskClasses[t].length })
    }
    const manifestPath = await writeManifest(spec.outDir, dim, tasks)
    const settings = {
      backend: embedder.name,
      steps: spec.steps,
      testFraction: spec.testFraction,
      shuffleSeed: spec.shuffleSeed ?? null,
      classIds: Object.fromEntries(classIds),
      preprocessing: 'grayscale, box-resample, per-row centering and L2 normalization',
    }
    await fs.writeFile(
      path.join(spec.outDir, 'extract_config.json'),
      JSON.stringify(settings, null, 2) + '\n',
    )
    return { manifestPath, dim, classIds, tasks }
  } catch (err) {
    // do not leave a half-written stream behind
    for (const name of written) {
      await fs.rm(path.join(spec.outDir, name), { force: true })
    }
    throw err
  }
}
