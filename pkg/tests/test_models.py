import re

import pytest
import torch
import torch.nn.functional as F

from patchforge._validation import module_digest
from patchforge.models import (
    CheckpointError,
    FreezePlan,
    GeometryError,
    UnknownBackboneError,
    apply_freeze_plan,
    forward_person_prob,
    load_backbone,
    load_checkpoint,
    save_checkpoint,
    trainable_parameter_names,
)


@pytest.fixture(scope="module")
def vit_b16():
    return load_backbone("vit-base-224", pretrained=False)


def allowlist(names, depth, trainable_layers):
    """Names expected trainable: listed encoder blocks, final norm (if the last block trains) and head."""
    keep = []
    for n in names:
        m = re.match(r"backbone\.(?:encoder\.)?layers?\.(\d+)\.", n)
        if m and int(m.group(1)) in trainable_layers:
            keep.append(n)
        elif n.startswith("backbone.layernorm") and depth - 1 in trainable_layers:
            keep.append(n)
        elif n.startswith("head."):
            keep.append(n)
    return keep


def test_vit_b16_geometry(vit_b16):
    assert vit_b16.depth == 12 and vit_b16.patch_size == 16 and vit_b16.image_size == 224


def test_unknown_backbone_lists_valid_keys():
    with pytest.raises(UnknownBackboneError, match="vit-base-224"):
        load_backbone("resnet50")


def test_head_init_deterministic():
    a, b = load_backbone("toy-vit-2", seed=2), load_backbone("toy-vit-2", seed=2)
    assert module_digest(a.head) == module_digest(b.head)
    assert module_digest(a) == module_digest(b)
    assert module_digest(load_backbone("toy-vit-2", seed=3).head) != module_digest(a.head)


@pytest.mark.parametrize("backbone", ["toy-vit-12", "vit-base-224"])
def test_top4_plan_matches_allowlist(backbone, vit_b16):
    model = vit_b16 if backbone == "vit-base-224" else load_backbone(backbone)
    apply_freeze_plan(model, FreezePlan.top4())
    names = [n for n, _ in model.named_parameters()]
    assert trainable_parameter_names(model) == allowlist(names, 12, {8, 9, 10, 11})


def test_empty_plan_trains_everything():
    model = apply_freeze_plan(load_backbone("toy-vit-12"), FreezePlan.none())
    assert all(p.requires_grad for p in model.parameters())


def test_freeze_everything_but_head():
    plan = FreezePlan(True, True, frozenset(range(12)), True)
    model = apply_freeze_plan(load_backbone("toy-vit-12"), plan)
    assert trainable_parameter_names(model) == ["head.weight", "head.bias"]


def test_plan_is_absolute_not_incremental():
    model = load_backbone("toy-vit-12")
    apply_freeze_plan(model, FreezePlan.top4())
    apply_freeze_plan(model, FreezePlan.none())
    assert all(p.requires_grad for p in model.parameters())


def test_plan_index_out_of_range():
    with pytest.raises(IndexError):
        apply_freeze_plan(load_backbone("toy-vit-2"), FreezePlan.top4())


def test_parameter_groups_partition():
    model = load_backbone("toy-vit-12")
    grouped = [n for params in model.parameter_groups().values() for n, _ in params]
    assert sorted(grouped) == sorted(n for n, _ in model.named_parameters())
    assert "backbone.embeddings.cls_token" in [n for n, _ in model.parameter_groups()["patch_embedding"]]


def test_dinov3_family_builds_and_freezes():
    model = load_backbone("dinov3-vitb16", pretrained=False)
    assert model.depth == 12
    apply_freeze_plan(model, FreezePlan.top4())
    assert not model.parameter_groups()["positional_embedding"]
    assert all(not p.requires_grad for _, p in model.parameter_groups()["encoder.7"])
    assert all(p.requires_grad for _, p in model.parameter_groups()["encoder.8"])


def test_duplicate_image_batch_independence():
    model = load_backbone("toy-vit-2")
    x = torch.rand(1, 3, 32, 32)
    p = forward_person_prob(model, torch.cat([x, x, torch.rand(1, 3, 32, 32)]))
    assert torch.allclose(p[0], p[1], atol=1e-6)


def test_geometry_mismatch_rejected():
    with pytest.raises(GeometryError):
        load_backbone("toy-vit-2")(torch.rand(2, 3, 40, 40))


def test_person_prob_differentiable_wrt_images():
    x = torch.rand(2, 3, 32, 32, requires_grad=True)
    forward_person_prob(load_backbone("toy-vit-2"), x).sum().backward()
    assert x.grad.abs().sum() > 0


def test_checkpoint_round_trip(tmp_path):
    model = apply_freeze_plan(load_backbone("toy-vit-12", seed=4), FreezePlan.top4())
    with torch.no_grad():
        model.head.weight.add_(0.5)
    x = torch.rand(4, 3, 32, 32)
    save_checkpoint(model, tmp_path / "c.pt", {"val": {"f1": 0.5}})
    back = load_checkpoint(tmp_path / "c.pt")
    assert back.backbone_id == "toy-vit-12" and back.freeze_plan == FreezePlan.top4()
    assert back.metrics == {"val": {"f1": 0.5}}
    with torch.no_grad():
        assert torch.equal(model(x), back(x))
    assert trainable_parameter_names(back) == trainable_parameter_names(model)


def test_truncated_and_tampered_checkpoints(tmp_path):
    path = save_checkpoint(load_backbone("toy-vit-2"), tmp_path / "c.pt")
    data = path.read_bytes()
    (tmp_path / "t.pt").write_bytes(data[: len(data) // 2])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "t.pt")
    payload = torch.load(path, weights_only=True)
    payload["state_dict"]["head.bias"] += 1
    torch.save(payload, tmp_path / "x.pt")
    with pytest.raises(CheckpointError, match="digest"):
        load_checkpoint(tmp_path / "x.pt")
    (tmp_path / "n.pt").write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "n.pt")


def test_one_step_moves_only_trainable_groups():
    model = apply_freeze_plan(load_backbone("toy-vit-12"), FreezePlan.top4())
    before = {g: [p.detach().clone() for _, p in ps] for g, ps in model.parameter_groups().items()}
    opt = torch.optim.SGD([p for p in model.parameters() if p.requires_grad], lr=0.5)
    model.train()
    F.cross_entropy(model(torch.rand(4, 3, 32, 32)), torch.tensor([0, 1, 0, 1])).backward()
    opt.step()
    for group, params in model.parameter_groups().items():
        same = all(torch.equal(a, p) for a, (_, p) in zip(before[group], params))
        if group in ("patch_embedding", "positional_embedding") or group in {f"encoder.{i}" for i in range(8)}:
            assert same, group
    assert not all(torch.equal(a, p) for a, (_, p) in zip(before["encoder.11"], model.parameter_groups()["encoder.11"]))
