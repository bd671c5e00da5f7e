/**
 * Class-to-task partitioning: disjoint splits covering every class,
 * deterministic given the spec. Default is sorted-class-id chunking;
 * a seeded shuffle reorders classes before chunking when requested.
 */

export interface PartitionSpec {
  steps: number
  shuffleSeed?: number
}

/** Small deterministic PRNG (mulberry32) so shuffles reproduce everywhere. */
export function mulberry32(seed: number): () => number {
  let a = seed >>> 0
  return () => {
    a |= 0
    a = (a + 0x6d2b79f5) | 0
    let t = Math.imul(a ^ (a >>> 15), 1 | a)
    t = (t + Math.imul(t ^ (t >>> 7), 61 | t)) ^ t
    return ((t ^ (t >>> 14)) >>> 0) / 4294967296
  }
}

export function partitionClasses(classNames: string[], spec: PartitionSpec): string[][] {
  if (spec.steps < 1) throw new Error(`steps must be >= 1, got ${spec.steps}`)
  if (classNames.length < spec.steps) {
    throw new Error(`cannot split ${classNames.length} classes into ${spec.steps} tasks`)
  }
  const ordered = [...classNames].sort()
  if (spec.shuffleSeed !== undefined) {
    const rand = mulberry32(spec.shuffleSeed)
    for (let i = ordered.length - 1; i > 0; i--) {
      const j = Math.floor(rand() * (i + 1))
      ;[ordered[i], ordered[j]] = [ordered[j], ordered[i]]
    }
  }
  // distribute remainder over the leading tasks so sizes differ by at most 1
  const base = Math.floor(ordered.length / spec.steps)
  const extra = ordered.length % spec.steps
  const tasks: string[][] = []
  let cursor = 0
  for (let t = 0; t < spec.steps; t++) {
    const size = base + (t < extra ? 1 : 0)
    tasks.push(ordered.slice(cursor, cursor + size))
    cursor += size
  }
  return tasks
}
