#!/usr/bin/env node
/**
 * protostream-extract: turn an image folder (one subdirectory per class)
 * into engine-ready feature files and a manifest.
 */

import yargs from 'yargs'
import { hideBin } from 'yargs/helpers'

import { extract } from './extract.js'

export async function main(argv: string[]): Promise<number> {
  const args = await yargs(argv)
    .command('$0 <dataset> <out>', 'extract features from an image folder', (y) =>
      y
        .positional('dataset', { type: 'string', demandOption: true })
        .positional('out', { type: 'string', demandOption: true }),
    )
    .option('steps', { type: 'number', default: 1, describe: 'number of tasks to split classes into' })
    .option('backend', { type: 'string', default: 'pixel', choices: ['pixel', 'tfjs'] })
    .option('model', { type: 'string', describe: 'graph-model path/url for the tfjs backend' })
    .option('test-fraction', { type: 'number', default: 0.2 })
    .option('shuffle-seed', { type: 'number', describe: 'shuffle classes before chunking' })
    .strict()
    .parse()

  try {
    const result = await extract({
      datasetDir: args.dataset as string,
      outDir: args.out as string,
      steps: args.steps,
      backend: args.backend,
      modelPath: args.model,
      testFraction: args.testFraction,
      shuffleSeed: args.shuffleSeed,
    })
    console.log(result.manifestPath)
    return 0
  } catch (err) {
    console.error(`error: ${err instanceof Error ? err.message : err}`)
    return 2
  }
}

main(hideBin(process.argv)).then((code) => {
  process.exitCode = code
})
