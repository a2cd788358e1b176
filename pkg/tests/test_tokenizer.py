import os
import tempfile
import unittest

import numpy as np

from veille.errors import ConfigError, DataError
from veille.tokenizer import (
    MIN_VOCAB_SIZE,
    BpeVocab,
    decode,
    encode,
    encode_for_model,
    load_vocab,
    save_vocab,
    train_bpe,
    truncate,
)

URDU_SAMPLES = [
    "یہ ایک اچھی بات ہے",
    "آپ کیسے ہیں؟",
    "tum bohat achay ho",
    "ye bakwas band karo",
]


def _random_text(rng, length):
    """Mixes ASCII, Latin-1, Arabic script, CJK and astral-plane code points."""
    ranges = [(0x20, 0x7E), (0xA0, 0xFF), (0x0600, 0x06FF), (0x4E00, 0x4E80), (0x1F600, 0x1F64F)]
    chars = []
    for _ in range(length):
        lo, hi = ranges[int(rng.integers(len(ranges)))]
        chars.append(chr(int(rng.integers(lo, hi + 1))))
    return "".join(chars)


class TestTrainBpe(unittest.TestCase):
    def test_first_merge_is_most_frequent_pair(self):
        vocab = train_bpe(["aaaa"], vocab_size=258)
        self.assertEqual(vocab.merges, ((b"a", b"a"),))
        self.assertEqual(vocab.size, 258)

    def test_no_repeated_pair_learns_nothing(self):
        vocab = train_bpe(["abc", "xyz"], vocab_size=300)
        self.assertEqual(vocab.merges, ())
        self.assertEqual(vocab.size, MIN_VOCAB_SIZE)

    def test_ties_break_lexicographically(self):
        # "ab" and "cd" both occur twice.
        vocab = train_bpe(["cdab", "abcd"], vocab_size=258)
        self.assertEqual(vocab.merges[0], (b"a", b"b"))

    def test_merges_match_brute_force_counts(self):
        corpus = ["the cat sat on the mat", "the hat"]
        vocab = train_bpe(corpus, vocab_size=260)
        seqs = [[bytes([b]) for b in text.encode("utf-8")] for text in corpus]
        for left, right in vocab.merges:
            counts = {}
            for seq in seqs:
                for pair in zip(seq, seq[1:]):
                    counts[pair] = counts.get(pair, 0) + 1
            best = max(counts.values())
            self.assertEqual(counts[(left, right)], best)
            self.assertEqual(min(p for p, c in counts.items() if c == best), (left, right))
            merged = []
            for seq in seqs:
                out, i = [], 0
                while i < len(seq):
                    if i + 1 < len(seq) and (seq[i], seq[i + 1]) == (left, right):
                        out.append(left + right)
                        i += 2
                    else:
                        out.append(seq[i])
                        i += 1
                merged.append(out)
            seqs = merged

    def test_deterministic(self):
        corpus = URDU_SAMPLES * 3
        self.assertEqual(train_bpe(corpus, 400, seed=1).merges, train_bpe(corpus, 400, seed=2).merges)

    def test_errors(self):
        with self.assertRaises(DataError):
            train_bpe([], 300)
        with self.assertRaises(ConfigError):
            train_bpe(["abc"], 256)

    def test_merged_tokens_are_concatenations(self):
        vocab = train_bpe(URDU_SAMPLES * 2, 350)
        for (left, right), token in zip(vocab.merges, vocab.tokens[256:]):
            self.assertEqual(token, left + right)
        self.assertEqual(len(set(vocab.token_to_id.values())), len(vocab.tokens))


class TestEncodeDecode(unittest.TestCase):
    def setUp(self):
        self.vocab = train_bpe(URDU_SAMPLES * 4 + ["hello world"] * 3, 420)

    def test_empty(self):
        self.assertEqual(encode(self.vocab, ""), [])
        self.assertEqual(decode(self.vocab, []), "")

    def test_applies_merges(self):
        vocab = BpeVocab(merges=((b"a", b"a"),))
        self.assertEqual(encode(vocab, "aaaa"), [256, 256])

    def test_round_trip_and_compression(self):
        rng = np.random.default_rng(0)
        samples = URDU_SAMPLES + ["hello world", "\x00\n\t"]
        samples += [_random_text(rng, int(rng.integers(0, 40))) for _ in range(10_000)]
        for text in samples:
            ids = encode(self.vocab, text)
            self.assertEqual(decode(self.vocab, ids), text)
            self.assertLessEqual(len(ids), len(text.encode("utf-8")))

    def test_unknown_id(self):
        with self.assertRaises(DataError):
            decode(self.vocab, [self.vocab.size + 5])

    def test_invalid_utf8(self):
        with self.assertRaises(DataError) as ctx:
            decode(self.vocab, [0xC3])
        self.assertIn("byte offset 0", str(ctx.exception))

    def test_padding_token(self):
        self.assertEqual(self.vocab.pad_id, self.vocab.size - 1)
        self.assertEqual(encode_for_model(self.vocab, "", 16), [self.vocab.pad_id])
        self.assertEqual(decode(self.vocab, [self.vocab.pad_id]), "")

    def test_truncate(self):
        self.assertEqual(truncate([1, 2, 3, 4], 2), [3, 4])
        self.assertEqual(truncate([1, 2, 3, 4], 2, keep="head"), [1, 2])
        self.assertEqual(truncate([1, 2], 5), [1, 2])
        with self.assertRaises(ConfigError):
            truncate([1], 1, keep="middle")


class TestVocabFile(unittest.TestCase):
    def setUp(self):
        self.temp_dir = tempfile.TemporaryDirectory()
        self.path = os.path.join(self.temp_dir.name, "vocab.bpe")

    def tearDown(self):
        self.temp_dir.cleanup()

    def test_save_and_load(self):
        vocab = train_bpe(URDU_SAMPLES * 3, 330)
        save_vocab(vocab, self.path)
        with open(self.path) as f:
            header = f.readline().split()
        self.assertEqual(header, ["veille-bpe", "1", str(vocab.size), str(len(vocab.merges))])
        self.assertEqual(load_vocab(self.path), vocab)

    def test_malformed_line_reports_line_number(self):
        with open(self.path, "w") as f:
            f.write("veille-bpe 1 258 1\nzz 61\n")
        with self.assertRaises(DataError) as ctx:
            load_vocab(self.path)
        self.assertIn(":2:", str(ctx.exception))

    def test_wrong_header(self):
        with open(self.path, "w") as f:
            f.write("something else\n")
        with self.assertRaises(DataError):
            load_vocab(self.path)

    def test_missing_file(self):
        with self.assertRaises(DataError):
            load_vocab(self.path)


if __name__ == "__main__":
    unittest.main()
