"""Train the byte-level BPE vocabulary shipped in data/tokenizer.

The corpus is the prompt dump written by `map4ts build-prompts`. The end of
sequence marker is left out of training so the C++ loader appends it as the
last id.
"""
import argparse
import json
import pathlib

from tokenizers import ByteLevelBPETokenizer


def texts(paths):
    for p in paths:
        seen = set()
        with open(p, encoding="utf-8") as f:
            for line in f:
                for t in json.loads(line)["text"]:
                    if t and t not in seen:
                        seen.add(t)
                        yield t


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("corpus", nargs="+", help="prompt JSONL files")
    ap.add_argument("--vocab-size", type=int, default=2048)
    ap.add_argument("--out", default=str(pathlib.Path(__file__).resolve().parents[1] / "data" / "tokenizer"))
    args = ap.parse_args()
    tok = ByteLevelBPETokenizer(add_prefix_space=False)
    tok.train_from_iterator(texts(args.corpus), vocab_size=args.vocab_size, min_frequency=2,
                            show_progress=False, special_tokens=[])
    out = pathlib.Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    tok.save_model(str(out))
    print(f"{tok.get_vocab_size()} entries written to {out}")


if __name__ == "__main__":
    main()
