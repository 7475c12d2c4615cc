#!/usr/bin/env python3
"""Builds a plain-text training corpus from docstrings of installed Python modules."""

import argparse
import ast
import os
import sys
import sysconfig

SKIP_DIRS = {"test", "tests", "idle_test", "__pycache__", "site-packages", "dist-packages"}


def module_files(root):
    for dirpath, dirnames, filenames in os.walk(root):
        dirnames[:] = sorted(d for d in dirnames if d not in SKIP_DIRS)
        for name in sorted(filenames):
            if name.endswith(".py"):
                yield os.path.join(dirpath, name)


def docstrings(path):
    try:
        with open(path, "rb") as f:
            tree = ast.parse(f.read(), filename=path)
    except (SyntaxError, ValueError, OSError, RecursionError):
        return
    for node in ast.walk(tree):
        if isinstance(node, (ast.Module, ast.ClassDef, ast.FunctionDef, ast.AsyncFunctionDef)):
            doc = ast.get_docstring(node)
            if doc and len(doc) >= 40 and doc.isascii():
                yield doc


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--out", required=True)
    parser.add_argument("--bytes", type=int, default=5_000_000)
    args = parser.parse_args()

    roots = [sysconfig.get_paths()["stdlib"]]
    for extra in ("/usr/local/lib/python3.10/dist-packages", "/usr/lib/python3/dist-packages"):
        if os.path.isdir(extra):
            roots.append(extra)

    seen = set()
    chunks = []
    total = 0
    for root in roots:
        for path in module_files(root):
            for doc in docstrings(path):
                if doc in seen:
                    continue
                seen.add(doc)
                text = doc + "\n\n"
                chunks.append(text)
                total += len(text)
                if total >= args.bytes:
                    break
            if total >= args.bytes:
                break
        if total >= args.bytes:
            break

    data = "".join(chunks)[: args.bytes]
    with open(args.out, "w", encoding="ascii") as f:
        f.write(data)
    print(f"wrote {len(data)} bytes to {args.out}", file=sys.stderr)
    return 0 if len(data) >= args.bytes // 2 else 1


if __name__ == "__main__":
    sys.exit(main())
