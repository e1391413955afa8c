"""Render a small synthetic singing corpus (transcriptions.txt + wavs/) and prepare it for training."""
import argparse
from pathlib import Path

from sifisinger import synthetic
from sifisinger.data import prepare_dataset


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("out", type=Path)
    p.add_argument("-n", type=int, default=4, help="number of utterances")
    p.add_argument("--seed", type=int, default=0)
    a = p.parse_args()
    synthetic.make_corpus(a.out / "corpus", n=a.n, seed=a.seed)
    prepared = prepare_dataset(a.out / "corpus" / "transcriptions.txt", a.out / "corpus" / "wavs", a.out / "prepared")
    print(prepared)


if __name__ == "__main__":
    main()
