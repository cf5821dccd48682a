"""Diagnosis-code ontology and its two embedding views.

The ontology is a rooted tree of codes with human-readable descriptions. Codes
are embedded two ways: structurally, with skip-gram-negative-sampling vectors
trained on uniform random walks over the undirected tree; and semantically,
with co-occurrence-factorization word vectors trained on the description
"sentence" along each code's root-to-leaf path. The two views are concatenated
per code and projected through a trainable affine map, then mean-pooled over a
visit's diagnosis set.
"""

import csv
import re
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ParseError, ValidationError
from .rng import stream

ROOT_PARENT_TOKEN = "ROOT"
_EMBED_MAGIC = b"CORE-EMB"
_EMBED_VERSION = 1

_TOKEN_SPLIT = re.compile(r"[^a-z0-9]+")


@dataclass(frozen=True)
class OntologyNode:
    node_id: str
    parent_id: str | None  # None for the root
    semantic_text: str


class OntologyTree:
    """Rooted tree of codes; validates single-root, known parents, acyclicity."""

    def __init__(self, nodes: dict[str, OntologyNode]):
        roots = [n.node_id for n in nodes.values() if n.parent_id is None]
        if len(roots) != 1:
            raise ValidationError(f"ontology must have exactly one root, found {len(roots)}")
        self.root_id = roots[0]
        self.nodes = dict(nodes)
        self._children: dict[str, list[str]] = {nid: [] for nid in nodes}
        for node in nodes.values():
            if node.parent_id is None:
                continue
            if node.parent_id not in nodes:
                raise ValidationError(
                    f"node {node.node_id!r} references unknown parent {node.parent_id!r}"
                )
            self._children[node.parent_id].append(node.node_id)
        for kids in self._children.values():
            kids.sort()
        # every node must reach the root without revisiting anything
        for nid in nodes:
            seen = set()
            cur = nid
            while cur is not None:
                if cur in seen:
                    raise ValidationError(f"ontology contains a cycle through {nid!r}")
                seen.add(cur)
                cur = nodes[cur].parent_id
            if self.root_id not in seen:
                raise ValidationError(f"node {nid!r} does not reach the root")

    def __len__(self) -> int:
        return len(self.nodes)

    def __contains__(self, node_id: str) -> bool:
        return node_id in self.nodes

    def node_ids(self) -> list[str]:
        return sorted(self.nodes)

    def children(self, node_id: str) -> list[str]:
        return list(self._children[node_id])

    def parent(self, node_id: str) -> str | None:
        return self.nodes[node_id].parent_id

    def path_from_root(self, node_id: str) -> list[str]:
        """Node ids from the root down to (and including) node_id."""
        if node_id not in self.nodes:
            raise ValidationError(f"unknown ontology node {node_id!r}")
        path = []
        cur: str | None = node_id
        while cur is not None:
            path.append(cur)
            cur = self.nodes[cur].parent_id
        path.reverse()
        return path

    def leaves(self) -> list[str]:
        return sorted(nid for nid, kids in self._children.items() if not kids)


def load_ontology(path) -> OntologyTree:
    """Read the child_id,parent_id,semantic_text CSV; one row has parent ROOT."""
    nodes: dict[str, OntologyNode] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        for lineno, row in enumerate(reader, start=1):
            if not row:
                continue
            if lineno == 1 and row[:2] == ["child_id", "parent_id"]:
                continue  # optional header
            if len(row) != 3:
                raise ParseError(f"{path}: line {lineno}: expected 3 columns, got {len(row)}")
            child, parent, text = row
            if child in nodes:
                raise ValidationError(f"{path}: duplicate node id {child!r}")
            parent_id = None if parent == ROOT_PARENT_TOKEN else parent
            nodes[child] = OntologyNode(child, parent_id, text)
    return OntologyTree(nodes)


def save_ontology(tree: OntologyTree, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["child_id", "parent_id", "semantic_text"])
        for nid in tree.node_ids():
            node = tree.nodes[nid]
            parent = ROOT_PARENT_TOKEN if node.parent_id is None else node.parent_id
            writer.writerow([nid, parent, node.semantic_text])


# ---------------------------------------------------------------------------
# Embedding tables
# ---------------------------------------------------------------------------

@dataclass
class EmbeddingTable:
    """Immutable id -> vector table (used for both node and word vectors)."""

    ids: tuple
    matrix: np.ndarray  # (len(ids), dim) float32
    _index: dict = field(init=False, repr=False)

    def __post_init__(self):
        self.matrix = np.ascontiguousarray(self.matrix, dtype=np.float32)
        if self.matrix.ndim != 2 or self.matrix.shape[0] != len(self.ids):
            raise ValidationError("embedding matrix shape does not match id count")
        if not np.all(np.isfinite(self.matrix)):
            raise ValidationError("embedding table contains non-finite values")
        self._index = {i: k for k, i in enumerate(self.ids)}

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def __contains__(self, key: str) -> bool:
        return key in self._index

    def vector(self, key: str) -> np.ndarray:
        if key not in self._index:
            raise ValidationError(f"no embedding for id {key!r}")
        return self.matrix[self._index[key]]

    def vector_or_zero(self, key: str) -> np.ndarray:
        """Out-of-vocabulary keys map to the zero vector."""
        idx = self._index.get(key)
        if idx is None:
            return np.zeros(self.dim, dtype=np.float32)
        return self.matrix[idx]

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(_EMBED_MAGIC)
            fh.write(struct.pack("<IIQ", _EMBED_VERSION, self.dim, len(self.ids)))
            for key, row in zip(self.ids, self.matrix):
                raw = key.encode("utf-8")
                fh.write(struct.pack("<I", len(raw)))
                fh.write(raw)
                fh.write(row.astype("<f4").tobytes())

    @classmethod
    def load(cls, path) -> "EmbeddingTable":
        with open(path, "rb") as fh:
            magic = fh.read(len(_EMBED_MAGIC))
            if magic != _EMBED_MAGIC:
                raise ParseError(f"{path}: bad magic {magic!r}")
            version, dim, count = struct.unpack("<IIQ", fh.read(16))
            if version != _EMBED_VERSION:
                raise ParseError(f"{path}: unsupported version {version}")
            ids = []
            rows = np.empty((count, dim), dtype=np.float32)
            for k in range(count):
                (id_len,) = struct.unpack("<I", fh.read(4))
                ids.append(fh.read(id_len).decode("utf-8"))
                rows[k] = np.frombuffer(fh.read(4 * dim), dtype="<f4")
        return cls(ids=tuple(ids), matrix=rows)


# ---------------------------------------------------------------------------
# Random-walk skip-gram over the tree
# ---------------------------------------------------------------------------

def random_walks(tree: OntologyTree, walks_per_node: int, walk_length: int,
                 rng: np.random.Generator) -> list[list[str]]:
    """Uniform (unbiased) random walks over the undirected tree edges."""
    neighbors = {}
    for nid in tree.node_ids():
        nbrs = tree.children(nid)
        parent = tree.parent(nid)
        if parent is not None:
            nbrs = nbrs + [parent]
        neighbors[nid] = nbrs
    walks = []
    for nid in tree.node_ids():
        for _ in range(walks_per_node):
            walk = [nid]
            cur = nid
            for _ in range(walk_length - 1):
                nbrs = neighbors[cur]
                if not nbrs:
                    break
                cur = nbrs[int(rng.integers(len(nbrs)))]
                walk.append(cur)
            walks.append(walk)
    return walks


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def train_node_embeddings(tree: OntologyTree, dim: int = 32, walks_per_node: int = 10,
                          walk_length: int = 20, window: int = 5, negatives: int = 5,
                          epochs: int = 3, learning_rate: float = 0.025,
                          seed: int = 0) -> EmbeddingTable:
    """Skip-gram with negative sampling on random tree walks; deterministic by seed."""
    if len(tree) < 2:
        raise ValidationError("ontology must have at least 2 nodes to embed")
    if dim < 2:
        raise ValidationError(f"embedding dim must be >= 2, got {dim}")
    ids = tree.node_ids()
    index = {nid: k for k, nid in enumerate(ids)}
    n = len(ids)

    walk_rng = stream(seed, "node-walks")
    walks = random_walks(tree, walks_per_node, walk_length, walk_rng)

    centers_parts, contexts_parts = [], []
    counts = np.zeros(n, dtype=np.float64)
    for walk in walks:
        idx = np.fromiter((index[w] for w in walk), dtype=np.int64, count=len(walk))
        np.add.at(counts, idx, 1.0)
        for offset in range(1, min(window, len(idx) - 1) + 1):
            centers_parts.append(idx[:-offset])
            contexts_parts.append(idx[offset:])
            centers_parts.append(idx[offset:])
            contexts_parts.append(idx[:-offset])
    centers = np.concatenate(centers_parts)
    contexts = np.concatenate(contexts_parts)

    noise = counts ** 0.75
    noise /= noise.sum()

    sgd_rng = stream(seed, "node-sgns")
    w_in = (sgd_rng.random((n, dim)) - 0.5) / dim
    w_out = np.zeros((n, dim), dtype=np.float64)

    n_pairs = len(centers)
    chunk = 2048
    total_chunks = max(1, epochs * ((n_pairs + chunk - 1) // chunk))
    step = 0
    for _ in range(epochs):
        order = sgd_rng.permutation(n_pairs)
        for start in range(0, n_pairs, chunk):
            lr = learning_rate * max(0.05, 1.0 - step / total_chunks)
            step += 1
            sel = order[start:start + chunk]
            c, t = centers[sel], contexts[sel]
            neg = sgd_rng.choice(n, size=(len(sel), negatives), p=noise)

            h = w_in[c]                                # (B, dim)
            u_pos = w_out[t]                           # (B, dim)
            u_neg = w_out[neg]                         # (B, negatives, dim)

            g_pos = _sigmoid(np.sum(h * u_pos, axis=1)) - 1.0          # (B,)
            g_neg = _sigmoid(np.einsum("bd,bkd->bk", h, u_neg))        # (B, negatives)

            grad_h = g_pos[:, None] * u_pos + np.einsum("bk,bkd->bd", g_neg, u_neg)
            # Aggregate per row and average by occurrence count: the node
            # vocabulary is small, so rows repeat many times per chunk and a
            # plain summed update overshoots badly.
            grad_out = np.zeros_like(w_out)
            occ_out = np.zeros(n)
            np.add.at(grad_out, t, g_pos[:, None] * h)
            np.add.at(occ_out, t, 1.0)
            np.add.at(grad_out, neg.reshape(-1),
                      (g_neg[:, :, None] * h[:, None, :]).reshape(-1, dim))
            np.add.at(occ_out, neg.reshape(-1), 1.0)
            grad_in = np.zeros_like(w_in)
            occ_in = np.zeros(n)
            np.add.at(grad_in, c, grad_h)
            np.add.at(occ_in, c, 1.0)
            w_out -= lr * grad_out / np.maximum(occ_out, 1.0)[:, None]
            w_in -= lr * grad_in / np.maximum(occ_in, 1.0)[:, None]

    if not np.all(np.isfinite(w_in)):
        raise ValidationError("node embedding training produced non-finite values")
    return EmbeddingTable(ids=tuple(ids), matrix=w_in.astype(np.float32))


# ---------------------------------------------------------------------------
# Semantics: tokenization, path sentences, co-occurrence factorization
# ---------------------------------------------------------------------------

def tokenize(text: str) -> list[str]:
    """Lowercase, split on whitespace/punctuation, drop empties."""
    return [t for t in _TOKEN_SPLIT.split(text.lower()) if t]


def code_sentence(code_id: str, tree: OntologyTree) -> list[str]:
    """Description tokens along the root-to-leaf path, root excluded."""
    path = tree.path_from_root(code_id)
    tokens: list[str] = []
    for nid in path[1:]:  # root's own text is excluded
        tokens.extend(tokenize(tree.nodes[nid].semantic_text))
    return tokens


def build_cooccurrence(sentences: list[list[str]], window: int = 5):
    """Symmetric window counts; returns (vocab ids, i-array, j-array, count-array)."""
    vocab = sorted({tok for sent in sentences for tok in sent})
    index = {tok: k for k, tok in enumerate(vocab)}
    counts: dict[tuple[int, int], float] = {}
    for sent in sentences:
        idx = [index[t] for t in sent]
        for pos, center in enumerate(idx):
            lo = max(0, pos - window)
            for other in idx[lo:pos]:
                counts[(center, other)] = counts.get((center, other), 0.0) + 1.0
                counts[(other, center)] = counts.get((other, center), 0.0) + 1.0
    if counts:
        keys = sorted(counts)
        ii = np.array([k[0] for k in keys], dtype=np.int64)
        jj = np.array([k[1] for k in keys], dtype=np.int64)
        xx = np.array([counts[k] for k in keys], dtype=np.float64)
    else:
        ii = jj = np.zeros(0, dtype=np.int64)
        xx = np.zeros(0, dtype=np.float64)
    return vocab, ii, jj, xx


def train_semantic_vectors(sentences: list[list[str]], dim: int = 32, window: int = 5,
                           epochs: int = 25, x_max: float = 100.0, alpha: float = 0.75,
                           learning_rate: float = 0.05, seed: int = 0) -> EmbeddingTable:
    """Weighted least-squares factorization of windowed co-occurrence counts.

    Loss per nonzero entry: f(x) * (w_i . c_j + b_i + b_j - ln x)^2 with
    f(x) = min(1, (x / x_max) ** alpha); AdaGrad updates; deterministic by seed.
    """
    sentences = [s for s in sentences if s]
    if not sentences:
        raise ValidationError("semantic corpus is empty")
    vocab, ii, jj, xx = build_cooccurrence(sentences, window)
    n = len(vocab)

    rng = stream(seed, "semantic-vectors")
    w_main = (rng.random((n, dim)) - 0.5) / dim
    w_ctx = (rng.random((n, dim)) - 0.5) / dim
    b_main = np.zeros(n)
    b_ctx = np.zeros(n)
    g_wm = np.full((n, dim), 1e-8)
    g_wc = np.full((n, dim), 1e-8)
    g_bm = np.full(n, 1e-8)
    g_bc = np.full(n, 1e-8)

    if len(xx):
        weight_all = np.minimum(1.0, (xx / x_max) ** alpha)
        log_all = np.log(xx)
        chunk = 4096
        for _ in range(epochs):
            order = rng.permutation(len(xx))
            for start in range(0, len(order), chunk):
                sel = order[start:start + chunk]
                i, j = ii[sel], jj[sel]
                f = weight_all[sel]
                diff = np.sum(w_main[i] * w_ctx[j], axis=1) + b_main[i] + b_ctx[j] - log_all[sel]
                g = f * diff  # d(loss)/d(inner), up to factor 2 folded into lr

                # Row-averaged chunk gradients (see the skip-gram trainer for
                # why summed duplicate-row updates are unstable here), with
                # AdaGrad accumulation on the averaged gradient.
                grad_wm = np.zeros_like(w_main)
                grad_wc = np.zeros_like(w_ctx)
                grad_bm = np.zeros_like(b_main)
                grad_bc = np.zeros_like(b_ctx)
                occ_i = np.zeros(n)
                occ_j = np.zeros(n)
                np.add.at(grad_wm, i, g[:, None] * w_ctx[j])
                np.add.at(grad_wc, j, g[:, None] * w_main[i])
                np.add.at(grad_bm, i, g)
                np.add.at(grad_bc, j, g)
                np.add.at(occ_i, i, 1.0)
                np.add.at(occ_j, j, 1.0)
                grad_wm /= np.maximum(occ_i, 1.0)[:, None]
                grad_wc /= np.maximum(occ_j, 1.0)[:, None]
                grad_bm /= np.maximum(occ_i, 1.0)
                grad_bc /= np.maximum(occ_j, 1.0)

                g_wm += grad_wm ** 2
                g_wc += grad_wc ** 2
                g_bm += grad_bm ** 2
                g_bc += grad_bc ** 2
                w_main -= learning_rate * grad_wm / np.sqrt(g_wm)
                w_ctx -= learning_rate * grad_wc / np.sqrt(g_wc)
                b_main -= learning_rate * grad_bm / np.sqrt(g_bm)
                b_ctx -= learning_rate * grad_bc / np.sqrt(g_bc)

    vectors = w_main + w_ctx
    if not np.all(np.isfinite(vectors)):
        raise ValidationError("semantic vector training produced non-finite values")
    return EmbeddingTable(ids=tuple(vocab), matrix=vectors.astype(np.float32))


def sentence_vector(word_vectors: EmbeddingTable, tokens) -> np.ndarray:
    """Mean of token vectors; unknown tokens contribute zero; empty -> zeros."""
    if not tokens:
        return np.zeros(word_vectors.dim, dtype=np.float64)
    acc = np.zeros(word_vectors.dim, dtype=np.float64)
    for tok in tokens:
        acc += word_vectors.vector_or_zero(tok)
    return acc / len(tokens)


def code_feature_matrix(code_ids, node_table: EmbeddingTable,
                        word_vectors: EmbeddingTable, sentences) -> np.ndarray:
    """Per code: concat(node vector, mean sentence word vector); rows follow code_ids."""
    rows = np.empty((len(code_ids), node_table.dim + word_vectors.dim), dtype=np.float64)
    for k, cid in enumerate(code_ids):
        rows[k, :node_table.dim] = node_table.vector(cid)
        rows[k, node_table.dim:] = sentence_vector(word_vectors, sentences[cid])
    return rows


def hierarchical_embed(code_ids, node_table: EmbeddingTable, word_vectors: EmbeddingTable,
                       sentences, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Mean over codes of the affine-projected concat(node, semantics) vectors.

    `sentences` maps code id -> token list (see code_sentence); the projection is
    weight @ concat + bias per code, mean-pooled over the set.
    """
    ordered = sorted(code_ids)
    if not ordered:
        raise ValidationError("hierarchical_embed requires a non-empty code set")
    weight = np.asarray(weight, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    feats = code_feature_matrix(ordered, node_table, word_vectors, sentences)
    if weight.shape[1] != feats.shape[1]:
        raise ValidationError(
            f"projection expects input width {weight.shape[1]}, got {feats.shape[1]}"
        )
    projected = feats @ weight.T + bias
    return projected.mean(axis=0)
