import pytest
import torch

from pdfnet import losses
from pdfnet.errors import ShapeError
from pdfnet.network import BackboneConfig, ModelConfig, PDFNet

SMALL = ModelConfig(backbone=BackboneConfig((16, 32, 64, 128)), decoder_channels=32, token_limit=16)


def make(cfg=SMALL, seed=0):
    torch.manual_seed(seed)
    return PDFNet(cfg).eval()


def inputs(b=1, size=256, seed=0):
    gen = torch.Generator().manual_seed(seed)
    return torch.rand(b, 3, size, size, generator=gen), torch.rand(b, 1, size, size, generator=gen)


@pytest.fixture(scope="module")
def model():
    return make()


@pytest.fixture(scope="module")
def outputs(model):
    with torch.no_grad():
        return model(*inputs(2))


def test_backbone_config_contract():
    with pytest.raises(ValueError):
        BackboneConfig((64, 32, 128, 256))
    with pytest.raises(ValueError):
        BackboneConfig(stage_strides=(2, 4, 8, 16))
    assert BackboneConfig((32, 64, 128, 256), width_scale=0.5).channels == (16, 32, 64, 128)


def test_stage_three_shape_default_widths():
    m = make(ModelConfig(decoder_channels=16, token_limit=16))
    with torch.no_grad():
        pyr = m.encode(*inputs(1))
    assert tuple(pyr.visual[2].shape) == (1, 128, 16, 16)
    assert tuple(pyr.visual[4].shape[-2:]) == (4, 4)
    assert len(pyr.visual) == len(pyr.depth) == len(pyr.patch) == 5


def test_output_contract(outputs):
    sizes = [tuple(p.shape) for p in outputs.stage_predictions]
    assert sizes == [(2, 1, 4, 4), (2, 1, 8, 8), (2, 1, 16, 16), (2, 1, 32, 32), (2, 1, 64, 64)]
    assert [tuple(d.shape) for d in outputs.stage_depths] == sizes
    assert tuple(outputs.final_prediction.shape) == tuple(outputs.final_depth.shape) == (2, 1, 256, 256)
    assert len(outputs.stage_logits) == len(outputs.stage_depth_logits) == 5
    for p in [*outputs.stage_predictions, outputs.final_prediction, *outputs.stage_depths, outputs.final_depth]:
        assert torch.isfinite(p).all() and p.min() > 0 and p.max() < 1


def test_non_square_resolution(model):
    with torch.no_grad():
        out = model(torch.rand(1, 3, 256, 512), torch.rand(1, 1, 256, 512))
    assert tuple(out.final_prediction.shape) == (1, 1, 256, 512)
    assert tuple(out.stage_predictions[0].shape) == (1, 1, 4, 8)


def test_zero_inputs_finite(model):
    with torch.no_grad():
        out = model(torch.zeros(1, 3, 256, 256), torch.zeros(1, 1, 256, 256))
    assert all(torch.isfinite(x).all() for x in [*out.stage_logits, out.final_logit, out.final_depth_logit])


def test_divisibility_enforced(model):
    with pytest.raises(ShapeError):
        model(torch.rand(1, 3, 224, 224), torch.rand(1, 1, 224, 224))
    with pytest.raises(ShapeError):
        model(torch.rand(1, 3, 256, 256), torch.rand(1, 1, 128, 128))


def test_patch_grid_only_touches_patch_branch(model):
    img, dep = inputs(1, seed=3)
    with torch.no_grad():
        a, b = model.encode(img, dep, 1), model.encode(img, dep, 8)
    for x, y in zip(a.visual + a.depth, b.visual + b.depth):
        assert torch.equal(x, y)
    assert not torch.equal(a.patch[0], b.patch[0])


def test_forward_is_deterministic(model):
    img, dep = inputs(1, seed=4)
    with torch.no_grad():
        a, b = model(img, dep), model(img, dep)
    assert torch.equal(a.final_logit, b.final_logit) and torch.equal(a.final_depth_logit, b.final_depth_logit)


def test_zero_parameters_give_constant_half():
    m = make()
    with torch.no_grad():
        for p in m.parameters():
            p.zero_()
        out = m(*inputs(1))
    for p in [*out.stage_predictions, out.final_prediction, *out.stage_depths, out.final_depth]:
        assert torch.equal(p, torch.full_like(p, 0.5))


def test_zero_gate_zero_depth_equals_visual_only():
    full = make()
    with torch.no_grad():
        full.depth_gate.zero_()
    ablated = PDFNet(ModelConfig(**{**SMALL.__dict__, "use_depth": False})).eval()
    ablated.load_state_dict(full.state_dict())
    img, _ = inputs(1, seed=5)
    zero = torch.zeros(1, 1, 256, 256)
    with torch.no_grad():
        a, b = full(img, zero), ablated(img, zero)
    for x, y in zip([*a.stage_logits, a.final_logit], [*b.stage_logits, b.final_logit]):
        assert torch.equal(x, y)


def test_skip_fusion_path_is_live(model):
    cfg = ModelConfig(**{**SMALL.__dict__, "use_shallow_fusion": False})
    plain = PDFNet(cfg).eval()
    plain.load_state_dict(model.state_dict())
    img, dep = inputs(1, seed=6)
    with torch.no_grad():
        diff = (model(img, dep).final_logit - plain(img, dep).final_logit).abs().max()
    assert diff > 0


def test_fse_ablation_runs():
    m = make(ModelConfig(**{**SMALL.__dict__, "use_fse": False}))
    with torch.no_grad():
        out = m(*inputs(1))
    assert tuple(out.final_prediction.shape) == (1, 1, 256, 256)


def test_depth_loss_reaches_visual_stage_one():
    m = make().train()
    img, dep = inputs(1, seed=7)
    out = m(img, dep)
    losses.silog_loss(out.final_depth, dep).backward()
    grads = [p.grad for p in m.stages.layers[0].parameters()]
    assert grads and all(g is not None and g.abs().sum() > 0 for g in grads)


def _census(m, img, dep, mask):
    m.zero_grad()
    out = m(img, dep)
    losses.total_loss(out, mask, dep).total.backward()
    return {n: p.grad for n, p in m.named_parameters()}


def test_gradient_census_after_one_step():
    # zero-initialized attention outputs block their own branch's gradient at init; one update opens them
    m = make(seed=1).train()
    img, dep = inputs(1, seed=8)
    mask = (torch.rand(1, 1, 256, 256, generator=torch.Generator().manual_seed(9)) > 0.5).float()
    opt = torch.optim.AdamW(m.parameters(), lr=1e-3)
    _census(m, img, dep, mask)
    opt.step()
    grads = _census(m, img, dep, mask)
    dead = [n for n, g in grads.items() if g is None or not torch.isfinite(g).all() or g.abs().sum() == 0]
    assert dead == []
