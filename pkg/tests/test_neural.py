import numpy as np
import pytest
import scipy.sparse as sp

from coarse2fine import autodiff as ad
from coarse2fine import meshkit as mk
from coarse2fine import neural as nn
from coarse2fine.camrender import Camera, project, sample_features


@pytest.fixture(scope="module")
def small_net(toy_model, toy_hierarchy):
    cfg = nn.NetworkConfig(
        encoder=nn.EncoderConfig(widths=(4, 4, 8, 8), global_dim=8, fc_dim=8, groups=2),
        heads=nn.HeadConfig(hidden=8),
        mrgcn=nn.MRGCNConfig(widths=(8, 8, 8), groups=2),
    )
    return nn.Network(toy_model, toy_hierarchy, (32, 32), cfg, seed=5)


def test_encoder_shapes_and_zero_image(rng):
    enc = nn.Encoder(rng, nn.EncoderConfig(), (64, 64))
    out = enc(np.zeros((2, 64, 64, 3)))
    assert [m.shape[1] for m in out.feature_maps] == [32, 16, 8, 4]
    assert out.h_g.shape == (2, 128)
    assert np.all(np.isfinite(out.h_g.data))
    assert enc.local_dim == 240


def test_encoder_rejects_channels(rng):
    enc = nn.Encoder(rng, nn.EncoderConfig(widths=(4, 4, 4, 4), groups=2), (16, 16))
    with pytest.raises(ValueError):
        enc(np.zeros((1, 16, 16, 1)))


def test_encoder_gradcheck_conv_weight(rng):
    enc = nn.Encoder(rng, nn.EncoderConfig(widths=(4, 4, 8, 8), global_dim=4, fc_dim=8, groups=2), (32, 32))
    img = rng.uniform(size=(1, 32, 32, 3))
    w = rng.normal(size=(1, 4))
    conv = enc.params["blocks"][1].params["conv"]
    base = conv.params["weight"].data.copy()

    def fn(t):
        conv.params["weight"] = t[0]
        return (enc(img).h_g * w).sum()

    idx = [(0, int(i)) for i in rng.choice(base.size, 12, replace=False)]
    assert ad.gradcheck(fn, [base], indices=idx) < 1e-5


def test_heads_zero_init_and_independence(small_net, rng):
    heads = small_net.params["heads"]
    h = ad.Tensor(rng.normal(size=(2, 8)))
    out = heads(h)
    assert np.array_equal(out.betas.data, np.zeros((2, 4)))
    assert np.array_equal(out.pose.data, np.zeros((2, 27)))
    assert np.allclose(out.focal.data, 110.0) and np.allclose(out.trans.data[:, 2], 7.0)
    single = heads(ad.Tensor(h.data[:1]))
    assert np.array_equal(single.focal.data, out.focal.data[:1])


def test_heads_gradcheck(rng):
    heads = nn.ParamHeads(rng, 6, 2, 2, nn.HeadConfig(hidden=5))
    for _, p in heads.named_parameters():
        p.data = p.data + rng.normal(scale=0.3, size=p.shape)
    h0 = rng.normal(size=(2, 6))
    w = rng.normal(size=(2, 2 + 6 + 3 + 1))

    def fn(t):
        o = heads(t[0])
        flat = ad.concat([o.betas, o.pose, o.trans, ad.reshape(o.focal, (2, 1))], axis=-1)
        return (flat * w).sum()

    assert ad.gradcheck(fn, [h0]) < 1e-6


def test_gcn_layer_examples(rng):
    X = rng.normal(size=(4, 3))
    H = nn.gcn_layer(sp.identity(4, format="csr"), ad.Tensor(X), np.eye(3)).data
    assert np.array_equal(H, X)
    A = sp.csr_matrix(np.full((2, 2), 0.5))
    H = nn.gcn_layer(A, ad.Tensor(np.array([[2.0], [4.0]])), np.array([[1.0]])).data
    assert np.array_equal(H, [[3.0], [3.0]])


def test_gcn_layer_loop_oracle(rng):
    C, Din, Dout = 10, 4, 3
    dense = (rng.uniform(size=(C, C)) < 0.3).astype(float)
    A = mk.normalize_adjacency(sp.csr_matrix(np.triu(dense, 1) + np.triu(dense, 1).T))
    X = rng.normal(size=(C, Din))
    W = rng.normal(size=(Din, Dout))
    H = nn.gcn_layer(A, ad.Tensor(X), W).data
    Ad = A.toarray()
    ref = np.zeros((C, Dout))
    for i in range(C):
        for o in range(Dout):
            s = 0.0
            for j in range(C):
                for d in range(Din):
                    s += Ad[i, j] * X[j, d] * W[d, o]
            ref[i, o] = s
    assert np.abs(H - ref).max() < 1e-12


def test_group_norm_contracts(rng):
    g = rng.normal(size=(1, 50, 2))
    g = (g - g.mean()) / g.std()
    out = nn.group_norm(ad.Tensor(g), 1, np.ones(2), np.zeros(2)).data
    # the epsilon guard shrinks a unit-variance group by 1/sqrt(1 + eps)
    assert np.abs(out - g / np.sqrt(1 + 1e-5)).max() < 1e-12
    assert np.abs(out - g).max() <= 5e-6 * np.abs(g).max()
    const = nn.group_norm(ad.Tensor(np.full((1, 5, 4), 3.0)), 2, np.ones(4), np.zeros(4)).data
    assert np.abs(const).max() == 0.0
    with pytest.raises(nn.ConfigError):
        nn.GroupNorm(6, 4)


def test_bottleneck_identity_and_shape(toy_hierarchy, rng):
    A = toy_hierarchy.levels[1].norm_adjacency
    blk = nn.Bottleneck(rng, 8, 8, 2, zero_last=True)
    x = rng.normal(size=(1, 121, 8))
    assert np.array_equal(blk(A, ad.Tensor(x)).data, x)
    wide = nn.Bottleneck(rng, 8, 12, 2)
    assert wide(A, ad.Tensor(x)).shape == (1, 121, 12)


def test_bottleneck_gradcheck(toy_hierarchy, rng):
    A = toy_hierarchy.levels[2].norm_adjacency
    blk = nn.Bottleneck(rng, 4, 6, 2)
    x = rng.normal(size=(1, 31, 4))
    w = rng.normal(size=(1, 31, 6))
    graph = blk.params["graph"]
    base = graph.data.copy()

    def fn(t):
        blk.params["graph"] = t[1]
        return (blk(A, t[0]) * w).sum()

    err = ad.gradcheck(fn, [x, base])
    blk.params["graph"] = graph
    assert err < 1e-5


def test_mrgcn_zero_init_and_shapes(small_net, toy_model, big_hierarchy, rng):
    mr = small_net.params["mrgcn"]
    x0 = rng.normal(size=(1, 482, mr.params["input"].params["weight"].shape[0]))
    assert np.array_equal(mr(ad.Tensor(x0)).data, np.zeros((1, 482, 3)))
    big = nn.MRGCN(rng, 5, big_hierarchy, nn.MRGCNConfig(widths=(4, 4, 4), groups=2))
    assert big(ad.Tensor(rng.normal(size=(1, 3889, 5)))).shape == (1, 3889, 3)


def test_mrgcn_config_mismatch(toy_hierarchy, rng):
    with pytest.raises(nn.ConfigError):
        nn.MRGCN(rng, 5, toy_hierarchy, nn.MRGCNConfig(widths=(4, 4)))


def test_mrgcn_gradcheck_encoder_weight(toy_hierarchy, rng):
    mr = nn.MRGCN(rng, 5, toy_hierarchy, nn.MRGCNConfig(widths=(4, 4, 4), groups=2))
    mr.params["head"].params["weight"].data = rng.normal(size=(4, 3))
    x0 = rng.normal(size=(1, 482, 5))
    blk = mr.params["down"][1].params["blocks"][0]
    base = blk.params["graph"].data.copy()

    def fn(t):
        blk.params["graph"] = t[0]
        return mr(ad.Tensor(x0))[0, 17, 1]

    assert ad.gradcheck(fn, [base]) < 1e-4


def _strip(n):
    verts = np.stack([np.arange(n, dtype=float), np.zeros(n), np.zeros(n)], 1)
    strip = np.concatenate([verts, verts + [0, 1, 0]])
    faces = [[i, i + 1, n + i] for i in range(n - 1)] + [[i + 1, n + i + 1, n + i] for i in range(n - 1)]
    return mk.Mesh(strip, np.array(faces))


def test_receptive_field_grows_with_levels():
    # Jacobian sparsity of k graph convolutions, with and without a trip through the hierarchy
    mesh = _strip(64)
    h = mk.build_hierarchy(mesh, 3)
    A0 = h.levels[0].norm_adjacency
    C = mesh.n_vertices
    probe = np.zeros((1, C, 1))
    probe[0, 0, 0] = 1.0

    def flat(x):
        for _ in range(3):
            x = nn.gcn_layer(A0, x, np.ones((1, 1)))
        return x

    def hier(x):
        x = nn.gcn_layer(A0, x, np.ones((1, 1)))
        x = ad.sparse_dense_matmul(h.levels[0].down, x)
        x = nn.gcn_layer(h.levels[1].norm_adjacency, x, np.ones((1, 1)))
        x = ad.sparse_dense_matmul(h.levels[1].down, x)
        x = nn.gcn_layer(h.levels[2].norm_adjacency, x, np.ones((1, 1)))
        x = ad.sparse_dense_matmul(h.levels[1].up, x)
        return ad.sparse_dense_matmul(h.levels[0].up, x)

    def reach(fn):
        touched = np.nonzero(fn(ad.Tensor(probe)).data[0, :, 0])[0]
        return np.abs(mesh.vertices[touched, 0]).max()

    assert reach(flat) <= 3
    assert reach(hier) > 3


def test_assemble_node_features(small_net, rng):
    cam = Camera.centered(40.0, 32, 32)
    V = rng.normal(size=(1, 482, 3)) * 0.5 + [0, 0, 6]
    V[0, 5] = V[0, 9]
    maps = [ad.Tensor(rng.normal(size=(1, 16 // 2**i, 16 // 2**i, 3))) for i in range(2)]
    h_g = rng.normal(size=(1, 8))
    X = nn.assemble_node_features(h_g, V, maps, cam).data
    assert X.shape == (1, 482, 8 + 6 + 3)
    assert np.array_equal(X[0, 5], X[0, 9])
    direct = sample_features(maps, project(V, cam), (32, 32)).data
    assert np.array_equal(X[..., 8:14], direct)
    assert np.array_equal(X[..., 14:], V)


def test_assemble_features_gradient_through_both_paths(rng):
    cam = Camera.centered(40.0, 16, 16)
    V = rng.normal(size=(1, 3, 3)) * 0.3 + [0, 0, 5]
    fmap = rng.normal(size=(1, 8, 8, 2))
    wl = rng.normal(size=(1, 3, 2))

    def local_only(t):
        X = nn.assemble_node_features(np.zeros((1, 1)), t[0], [ad.Tensor(fmap)], cam)
        return (X[..., 1:3] * wl).sum()

    V_t = ad.Tensor(V, requires_grad=True)
    g_local = ad.backward(local_only([V_t]))[V_t]
    assert np.abs(g_local).sum() > 0
    assert ad.gradcheck(local_only, [V]) < 1e-5
    V_t = ad.Tensor(V, requires_grad=True)
    X = nn.assemble_node_features(np.zeros((1, 1)), V_t, [ad.Tensor(fmap)], cam)
    g_xyz = ad.backward(X[..., 3:].sum())[V_t]
    assert np.array_equal(g_xyz, np.ones_like(V))


def test_refine_algebra(rng):
    V = rng.normal(size=(5, 3))
    a, b = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
    assert np.array_equal(nn.refine(V, np.zeros_like(V)).data, V)
    assert np.array_equal(nn.refine(V, -V).data, np.zeros_like(V))
    assert np.allclose(nn.refine(nn.refine(V, a), b).data, nn.refine(V, a + b).data, atol=1e-15)


def test_every_parameter_gets_gradient(small_net, rng):
    # zero-initialized output layers gate their inputs; open them before checking
    for _, p in small_net.named_parameters():
        if not np.any(p.data):
            p.data = rng.normal(scale=0.05, size=p.shape) + (p.data if p.data.ndim == 1 else 0)
    imgs = rng.uniform(size=(2, 32, 32, 3))
    from coarse2fine.pipeline import predict

    pred = predict(small_net, imgs, masks=("fine",))
    loss = (pred.V_f * pred.V_f).sum() + pred.mask_f.sum() + (pred.params.focal * 0.01).sum()
    grads = ad.backward(loss)
    dead = [n for n, p in small_net.named_parameters() if p not in grads or not np.any(grads[p])]
    assert dead == []
