"""Freeze first-noun-chunk heads for a list of queries.

Usage: python subject_fixture.py queries.txt out.jsonl

Requires spaCy and an English pipeline; the versions used are written to
out.jsonl.manifest.json next to the output.
"""
import json
import sys

import spacy
import en_core_web_sm


def main(queries_path, out_path):
    nlp = en_core_web_sm.load()
    with open(queries_path, encoding="utf-8") as f:
        queries = [line.rstrip("\n") for line in f if line.strip()]
    with open(out_path, "w", encoding="utf-8") as out:
        for q in queries:
            doc = nlp(q)
            chunks = list(doc.noun_chunks)
            if chunks:
                c = chunks[0]
                rec = {"query": q, "chunk": c.text, "head": c.root.text.lower(),
                       "char_start": c.start_char, "char_end": c.end_char}
            else:
                rec = {"query": q, "chunk": None, "head": None,
                       "char_start": None, "char_end": None}
            out.write(json.dumps(rec) + "\n")
    with open(out_path + ".manifest.json", "w", encoding="utf-8") as m:
        json.dump({"parser": "spacy " + spacy.__version__,
                   "model": "en_core_web_sm " + nlp.meta["version"],
                   "count": len(queries)}, m, indent=2)
        m.write("\n")


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
