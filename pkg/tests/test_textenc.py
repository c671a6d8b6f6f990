import numpy as np
import pytest
import torch

from tvp.dataset import build_vocabulary, tokenize
from tvp.errors import FormatError, ValidationError
from tvp.textenc import TextEncoder, encode_text, import_external_embeddings, save_external_embeddings
from tvp.tim import TextInferenceModule


def _ids(tokens, M=8):
    ids = torch.zeros(1, M, dtype=torch.long)
    ids[0, : len(tokens)] = torch.tensor(tokens)
    mask = ids != 0
    return ids, mask


def test_zero_depth_one_hot_lookup():
    V, M = 6, 8
    enc = TextEncoder(V, M, d_u=V, depth=0)
    with torch.no_grad():
        enc.tok.weight.copy_(torch.eye(V))
    ids, mask = _ids([1, 4, 3, 5])
    out = enc(ids, mask)
    for j, k in enumerate([1, 4, 3, 5]):
        expect = torch.eye(V)[k] + enc.pos.weight[j]
        assert torch.allclose(out.u[0, j], expect)
    assert torch.equal(out.u_cls, out.u[:, 0])


def test_padding_rows_zero_and_deterministic():
    enc = TextEncoder(6, 8, d_u=8, depth=2)
    ids, mask = _ids([1])
    a, b = enc(ids, mask), enc(ids, mask)
    assert torch.all(a.u[0, 1:] == 0)
    assert torch.equal(a.u, b.u)


def test_range_and_shape_checks():
    enc = TextEncoder(6, 8, d_u=8)
    ids, mask = _ids([1, 7])
    with pytest.raises(ValidationError):
        enc(ids, mask)
    with pytest.raises(ValidationError):
        enc(torch.ones(1, 5, dtype=torch.long), torch.ones(1, 5, dtype=torch.bool))
    with pytest.raises(ValidationError):
        TextEncoder(6, 8, depth=3)


def test_permutation_sensitive():
    torch.manual_seed(0)
    enc = TextEncoder(10, 8, d_u=8, depth=1)
    a = enc(*_ids([1, 4, 5, 6]))
    b = enc(*_ids([1, 5, 4, 6]))
    assert not torch.allclose(a.u, b.u)


def test_unused_rows_get_zero_gradient():
    torch.manual_seed(0)
    enc = TextEncoder(10, 8, d_u=8, depth=1)
    tim = TextInferenceModule(4, 8, 8)
    words = enc(*_ids([1, 3, 5]))
    tim(words.u, words.mask).pow(2).sum().backward()
    g = enc.tok.weight.grad
    used = {1, 3, 5}
    for r in range(10):
        if r in used:
            assert g[r].abs().sum() > 0
        else:
            assert torch.all(g[r] == 0), r


def test_encode_text_from_tokenized():
    vocab = build_vocabulary(["the digit 3 is moving up"])
    tok = tokenize("the digit 3 is moving up", vocab, 12)
    enc = TextEncoder(len(vocab), 12, d_u=8)
    out = encode_text(tok, enc)
    assert out.u.shape == (1, 12, 8)
    assert out.mask[0].sum() == tok.mask.sum()


def test_external_roundtrip(tmp_path):
    u = np.zeros((40, 32), np.float32)
    mask = np.zeros(40, bool)
    mask[:7] = True
    u[:7] = np.random.default_rng(0).normal(size=(7, 32))
    save_external_embeddings(tmp_path / "e.bin", u, mask)
    words = import_external_embeddings(tmp_path / "e.bin", 40, 32)
    assert torch.equal(words.u[0], torch.from_numpy(u)) and words.mask[0].sum() == 7
    with pytest.raises(FormatError):
        import_external_embeddings(tmp_path / "e.bin", 40, 16)
    u[20, 3] = 1.0
    save_external_embeddings(tmp_path / "bad.bin", u, mask)
    with pytest.raises(ValidationError):
        import_external_embeddings(tmp_path / "bad.bin", 40, 32)
    (tmp_path / "short.bin").write_bytes((tmp_path / "e.bin").read_bytes()[:-5])
    with pytest.raises(FormatError):
        import_external_embeddings(tmp_path / "short.bin")
