"""Write a toy prose corpus and an instruction file for the CLI pipeline."""

import argparse
from pathlib import Path

from dlmlab.corpus import write_corpus, write_instructions


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out-dir", type=Path, default=Path("data"))
    ap.add_argument("--chars", type=int, default=400_000, help="corpus size in characters")
    ap.add_argument("--instructions", type=int, default=4000, help="number of prompt/response pairs")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    args.out_dir.mkdir(parents=True, exist_ok=True)
    corpus = write_corpus(args.out_dir / "corpus.txt", args.chars, args.seed)
    instr = write_instructions(args.out_dir / "instructions.jsonl", args.instructions, args.seed + 1)
    print(f"wrote {corpus} and {instr}")


if __name__ == "__main__":
    main()
