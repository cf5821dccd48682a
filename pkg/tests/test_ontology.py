"""Ontology parsing, two-view code embedding training, and serialization tests."""

import struct

import numpy as np
import pytest
import torch

from cohortlearn.errors import ValidationError
from cohortlearn.ontology import (
    EmbeddingTable,
    code_feature_matrix,
    code_sentence,
    hierarchical_embed,
    load_ontology,
    save_ontology,
    sentence_vector,
    tokenize,
    train_node_embeddings,
    train_semantic_vectors,
)

from oracles import cosine, max_rel_grad_err


def _write_csv(path, rows, header="child_id,parent_id,semantic_text"):
    path.write_text(header + "\n" + "\n".join(rows) + "\n", encoding="utf-8")


def _two_branch_tree(tmp_path, name="tree.csv"):
    """root -> {heart, kidney}; heart -> {h1, h2}; kidney -> {k1}."""
    path = tmp_path / name
    _write_csv(path, [
        "root,ROOT,clinical findings",
        "heart,root,diseases of the circulatory system",
        "kidney,root,diseases of the genitourinary system",
        "h1,heart,acute myocardial infarction",
        "h2,heart,chronic ischemic heart disease",
        "k1,kidney,acute kidney failure",
    ])
    return load_ontology(path)


def test_load_ontology_structure(tmp_path):
    tree = _two_branch_tree(tmp_path)
    assert tree.root_id == "root"
    assert tree.nodes["h1"].parent_id == "heart"
    assert tree.nodes["heart"].parent_id == "root"
    assert tree.nodes["root"].parent_id is None


def test_ontology_requires_exactly_one_root(tmp_path):
    no_root = tmp_path / "noroot.csv"
    _write_csv(no_root, ["a,b,x", "b,a,y"])
    with pytest.raises(ValidationError):
        load_ontology(no_root)
    two_roots = tmp_path / "two.csv"
    _write_csv(two_roots, ["a,ROOT,x", "b,ROOT,y"])
    with pytest.raises(ValidationError):
        load_ontology(two_roots)


def test_ontology_rejects_missing_parent(tmp_path):
    path = tmp_path / "orphan.csv"
    _write_csv(path, ["root,ROOT,x", "leaf,ghost,y"])
    with pytest.raises(ValidationError):
        load_ontology(path)


def test_ontology_round_trip(tmp_path):
    tree = _two_branch_tree(tmp_path)
    out = tmp_path / "again.csv"
    save_ontology(tree, out)
    again = load_ontology(out)
    assert set(again.nodes) == set(tree.nodes)
    for nid in tree.nodes:
        assert again.nodes[nid].parent_id == tree.nodes[nid].parent_id
        assert again.nodes[nid].semantic_text == tree.nodes[nid].semantic_text


def test_tokenize_lowercases_and_splits_punctuation():
    assert tokenize("Acute myocardial-infarction, NOS") == [
        "acute", "myocardial", "infarction", "nos"]
    assert tokenize("") == []


def test_code_sentence_excludes_root(tmp_path):
    tree = _two_branch_tree(tmp_path)
    assert code_sentence("h1", tree) == [
        "diseases", "of", "the", "circulatory", "system",
        "acute", "myocardial", "infarction",
    ]


def test_code_sentence_depth_one_leaf(tmp_path):
    path = tmp_path / "flat.csv"
    _write_csv(path, ["root,ROOT,everything", "solo,root,lone finding"])
    tree = load_ontology(path)
    assert code_sentence("solo", tree) == ["lone", "finding"]


def test_code_sentences_of_siblings_share_prefix(tmp_path):
    tree = _two_branch_tree(tmp_path)
    a = code_sentence("h1", tree)
    b = code_sentence("h2", tree)
    prefix = ["diseases", "of", "the", "circulatory", "system"]
    assert a[:5] == prefix and b[:5] == prefix
    assert a[5:] != b[5:]


def test_code_sentence_unknown_code(tmp_path):
    tree = _two_branch_tree(tmp_path)
    with pytest.raises(ValidationError):
        code_sentence("nope", tree)


def test_node_embeddings_shapes_and_determinism(tmp_path):
    tree = _two_branch_tree(tmp_path)
    table = train_node_embeddings(tree, dim=8, epochs=2, seed=5)
    again = train_node_embeddings(tree, dim=8, epochs=2, seed=5)
    for nid in tree.nodes:
        vec = table.vector(nid)
        assert vec.shape == (8,)
        assert np.all(np.isfinite(vec))
        assert np.array_equal(vec, again.vector(nid))


def test_node_embeddings_need_two_nodes(tmp_path):
    path = tmp_path / "tiny.csv"
    _write_csv(path, ["root,ROOT,alone"])
    with pytest.raises(ValidationError):
        train_node_embeddings(load_ontology(path), dim=4)


def test_siblings_closer_than_cross_branch():
    """Averaged over 5 seeds, same-parent leaves embed closer (cosine) than
    leaves from different root branches on a depth-3 tree of realistic width."""
    from cohortlearn.data import SyntheticSpec, generate_synthetic

    _, tree, _ = generate_synthetic(SyntheticSpec(
        n_patients=20, n_planted_cohorts=8, codes_per_cohort=4, noise_rate=0.1,
        readmit_base_rate=0.3, readmit_cohort_shift=0.0,
        visits_per_patient_mean=1.5, seed=0))
    sibling = []
    cross = []
    for seed in range(5):
        table = train_node_embeddings(tree, seed=seed)
        sibling.append(cosine(table.vector("000.0"), table.vector("000.1")))
        cross.append(cosine(table.vector("000.0"), table.vector("002.1")))
    assert np.mean(sibling) > np.mean(cross)


def test_semantic_cooccurrence_orders_cosines():
    sentences = [["alpha", "beta", "filler"] for _ in range(30)]
    sentences += [["gamma", "filler"] for _ in range(30)]
    table = train_semantic_vectors(sentences, dim=8, seed=2)
    assert cosine(table.vector("alpha"), table.vector("beta")) > \
        cosine(table.vector("alpha"), table.vector("gamma"))


def test_semantic_single_token_corpus():
    table = train_semantic_vectors([["only"]], dim=4, seed=0)
    vec = table.vector("only")
    assert vec.shape == (4,)
    assert np.all(np.isfinite(vec))


def test_semantic_empty_corpus_rejected():
    with pytest.raises(ValidationError):
        train_semantic_vectors([], dim=4)


def test_oov_token_maps_to_zero():
    table = train_semantic_vectors([["word", "other"]], dim=4, seed=0)
    assert np.array_equal(table.vector_or_zero("missing"), np.zeros(4))
    assert np.array_equal(sentence_vector(table, ["missing", "missing"]), np.zeros(4))


def test_no_nan_over_seed_sweep(tmp_path):
    tree = _two_branch_tree(tmp_path)
    sentences = [code_sentence(nid, tree) for nid in ("h1", "h2", "k1")]
    for seed in range(10):
        nodes = train_node_embeddings(tree, dim=8, epochs=2, seed=seed)
        words = train_semantic_vectors(sentences, dim=8, epochs=10, seed=seed)
        assert np.all(np.isfinite(nodes.matrix))
        assert np.all(np.isfinite(words.matrix))


def _tables(node_dim=3, word_dim=2):
    nodes = EmbeddingTable(("a", "b"), np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]))
    words = EmbeddingTable(("x", "y"), np.array([[10.0, 0.0], [0.0, 2.0]]))
    sentences = {"a": ["x", "y"], "b": ["y"]}
    return nodes, words, sentences


def test_hierarchical_embed_identity_projection():
    nodes, words, sentences = _tables()
    weight = np.eye(5)
    bias = np.zeros(5)
    out = hierarchical_embed(["a"], nodes, words, sentences, weight, bias)
    # concat(node a, mean of word vectors x and y)
    assert np.allclose(out, [1.0, 2.0, 3.0, 5.0, 1.0])


def test_hierarchical_embed_two_codes_average():
    nodes, words, sentences = _tables()
    rng = np.random.default_rng(0)
    weight = rng.normal(size=(4, 5))
    bias = rng.normal(size=4)
    h_a = weight @ np.array([1.0, 2.0, 3.0, 5.0, 1.0]) + bias
    h_b = weight @ np.array([4.0, 5.0, 6.0, 0.0, 2.0]) + bias
    out = hierarchical_embed(["a", "b"], nodes, words, sentences, weight, bias)
    assert np.allclose(out, (h_a + h_b) / 2.0)


def test_hierarchical_embed_zero_semantics():
    nodes, _, sentences = _tables()
    zero_words = EmbeddingTable(("x", "y"), np.zeros((2, 2)))
    weight = np.hstack([np.eye(3), np.zeros((3, 2))])
    out = hierarchical_embed(["a"], nodes, zero_words, sentences, weight, np.zeros(3))
    assert np.allclose(out, [1.0, 2.0, 3.0])


def test_hierarchical_embed_permutation_invariant():
    nodes, words, sentences = _tables()
    rng = np.random.default_rng(1)
    weight = rng.normal(size=(4, 5))
    bias = rng.normal(size=4)
    fwd = hierarchical_embed(["a", "b"], nodes, words, sentences, weight, bias)
    rev = hierarchical_embed(["b", "a"], nodes, words, sentences, weight, bias)
    assert np.array_equal(fwd, rev)


def test_hierarchical_embed_empty_set_rejected():
    nodes, words, sentences = _tables()
    with pytest.raises(ValidationError):
        hierarchical_embed([], nodes, words, sentences, np.eye(5), np.zeros(5))


def test_projection_gradient_matches_finite_differences():
    """Torch twin of the affine projection + mean against central differences
    of the numpy op itself."""
    nodes, words, sentences = _tables()
    feats = code_feature_matrix(["a", "b"], nodes, words, sentences)
    rng = np.random.default_rng(4)
    probe = rng.normal(size=4)
    linear = torch.nn.Linear(5, 4, dtype=torch.float64)
    with torch.no_grad():
        linear.weight.copy_(torch.as_tensor(rng.normal(size=(4, 5))))
        linear.bias.copy_(torch.as_tensor(rng.normal(size=4)))

    def loss_fn():
        out = linear(torch.as_tensor(feats, dtype=torch.float64)).mean(dim=0)
        return (out * torch.as_tensor(probe)).sum()

    assert max_rel_grad_err(loss_fn, linear) <= 1e-3
    # the numpy op agrees with the torch twin at the same parameters
    out_np = hierarchical_embed(
        ["a", "b"], nodes, words, sentences,
        linear.weight.detach().numpy(), linear.bias.detach().numpy())
    twin = linear(torch.as_tensor(feats, dtype=torch.float64)).mean(dim=0)
    assert np.allclose(out_np, twin.detach().numpy(), atol=1e-12)


def test_embedding_binary_format(tmp_path):
    rng = np.random.default_rng(9)
    ids = ("code.a", "code.b", "longer-identifier")
    matrix = rng.normal(size=(3, 5)).astype(np.float32)
    table = EmbeddingTable(ids, matrix)
    path = tmp_path / "emb.bin"
    table.save(path)

    blob = path.read_bytes()
    assert blob[:8] == b"CORE-EMB"
    version, dim, count = struct.unpack_from("<IIQ", blob, 8)
    assert version == 1
    assert dim == 5
    assert count == 3
    offset = 8 + struct.calcsize("<IIQ")
    seen = {}
    for _ in range(count):
        (id_len,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        ident = blob[offset:offset + id_len].decode("utf-8")
        offset += id_len
        values = struct.unpack_from(f"<{dim}f", blob, offset)
        offset += 4 * dim
        seen[ident] = np.array(values, dtype=np.float32)
    assert offset == len(blob)
    assert set(seen) == set(ids)
    for k, ident in enumerate(ids):
        assert np.array_equal(seen[ident], matrix[k])


def test_embedding_round_trip_exact(tmp_path):
    rng = np.random.default_rng(10)
    table = EmbeddingTable(("p", "q"), rng.normal(size=(2, 7)).astype(np.float32))
    path = tmp_path / "t.bin"
    table.save(path)
    again = EmbeddingTable.load(path)
    assert again.dim == 7
    for ident in ("p", "q"):
        assert np.array_equal(again.vector(ident), table.vector(ident))
