"""Network forward passes: shapes, invariances, gradients, accounting."""
import numpy as np
import pytest

import aecnn.autodiff as ad
import aecnn.geometry as geo
import aecnn.lrf as lrfmod
import aecnn.neighbors as nb
from aecnn.config import (
    NetworkConfig,
    SaFirstConfig,
    SaNextConfig,
    desk_classification_config,
    desk_segmentation_config,
)
from aecnn.network import (
    AlignVariant,
    Model,
    SaOutput,
    align_feature,
    aligned_edge_conv,
    as_model,
    classify,
    count_operations,
    count_parameters,
    feature_propagation,
    pointnet_kernel,
    sa_first,
    sa_next,
    segment,
)

from oracles import rotation_from_axis_angle


def tiny_config(**kw) -> NetworkConfig:
    base = dict(
        n_points=32,
        n_classes=3,
        sa_first=SaFirstConfig(n_ref=16, k=8, widths=(8, 16)),
        sa_next=(SaNextConfig(k=4, widths=(16, 24)),),
        head_widths=(16,),
        aeconv1_hidden=8,
        fp_align_hidden=8,
    )
    base.update(kw)
    return NetworkConfig(**base)


def tiny_seg_config(**kw) -> NetworkConfig:
    return tiny_config(n_parts=2, fp_widths=(16, 12), point_head=(8,), **kw)


def random_cloud(rng, n=32):
    pts = rng.normal(size=(n, 3))
    return geo.normalize(geo.PointCloud(pts)).points


def rotations(rng, count):
    for _ in range(count):
        yield geo.sample_arbitrary_rotation(rng)


class TestShapes:
    def test_classify_logits_shape(self):
        rng = np.random.default_rng(0)
        model = Model(tiny_config(), seed=1)
        pts = random_cloud(rng)
        logits = model.predict_logits(pts)
        assert logits.shape == (3,)
        assert np.isfinite(logits).all()

    def test_batch_matches_single(self):
        # Same values up to BLAS rounding; the underlying GEMMs pick
        # different kernels for different batch shapes so bit equality
        # across shapes is not promised (repeat calls at one shape are).
        rng = np.random.default_rng(1)
        model = Model(tiny_config(), seed=1)
        batch = np.stack([random_cloud(rng) for _ in range(3)])
        got = model.predict_logits_batch(batch)
        for i in range(3):
            single = model.predict_logits(batch[i])
            assert np.abs(got[i] - single).max() < 1e-12
        again = model.predict_logits_batch(batch)
        assert np.array_equal(got, again)

    def test_wrong_point_count_rejected(self):
        model = Model(tiny_config(), seed=0)
        with pytest.raises(ValueError, match="32 points"):
            model.predict_logits(np.zeros((16, 3)))

    def test_segment_logits_shape(self):
        rng = np.random.default_rng(2)
        model = Model(tiny_seg_config(), seed=1)
        pts = random_cloud(rng)
        out = model.predict_part_logits(pts, class_label=1)
        assert out.shape == (32, 2)
        assert np.isfinite(out).all()

    def test_segment_needs_part_head(self):
        model = Model(tiny_config(), seed=0)
        with pytest.raises(Exception, match="segmentation"):
            model.segment_batch(np.zeros((1, 32, 3)), np.zeros((1, 3)))

    def test_segment_onehot_shape_checked(self):
        model = Model(tiny_seg_config(), seed=0)
        with pytest.raises(ValueError, match="one-hot"):
            model.segment_batch(np.zeros((1, 32, 3)), np.zeros((1, 2)))

    def test_ball_search_mode_runs(self):
        rng = np.random.default_rng(3)
        cfg = tiny_config(sa_first=SaFirstConfig(
            n_ref=16, k=8, search="ball", radius=0.7, widths=(8, 16)))
        model = Model(cfg, seed=1)
        logits = model.predict_logits(random_cloud(rng))
        assert np.isfinite(logits).all()

    def test_max_projection_anchor_runs(self):
        rng = np.random.default_rng(4)
        cfg = tiny_config(sa_first=SaFirstConfig(
            n_ref=16, k=8, anchor="max_projection", widths=(8, 16)))
        model = Model(cfg, seed=1)
        assert np.isfinite(model.predict_logits(random_cloud(rng))).all()


class TestRotationInvariance:
    @pytest.mark.parametrize("variant", ["edgeconv", "aeconv1", "aeconv3"])
    def test_classification_invariant(self, variant):
        rng = np.random.default_rng(10)
        model = Model(tiny_config(variant=variant), seed=2)
        pts = random_cloud(rng)
        base = model.predict_logits(pts)
        for rot in rotations(rng, 5):
            dev = np.abs(model.predict_logits(pts @ rot.T) - base).max()
            assert dev < 1e-6, f"{variant}: deviation {dev}"

    def test_aeconv2_conditions_on_raw_frames(self):
        # aeconv2 feeds the frame matrices themselves (not their relative
        # rotation) into its alignment MLP. Frames co-rotate with the cloud,
        # so this variant is structurally not rotation invariant. Kept as a
        # documented property rather than a goal.
        rng = np.random.default_rng(14)
        model = Model(tiny_config(variant="aeconv2"), seed=2)
        pts = random_cloud(rng)
        base = model.predict_logits(pts)
        devs = [np.abs(model.predict_logits(pts @ r.T) - base).max()
                for r in rotations(rng, 5)]
        assert max(devs) > 1e-4

    def test_segmentation_invariant(self):
        rng = np.random.default_rng(11)
        model = Model(tiny_seg_config(), seed=2)
        pts = random_cloud(rng)
        base = model.predict_part_logits(pts, class_label=0)
        for rot in rotations(rng, 4):
            got = model.predict_part_logits(pts @ rot.T, class_label=0)
            assert np.abs(got - base).max() < 1e-6

    def test_absolute_features_are_not_invariant(self):
        # Negative control: world-coordinate inputs with no alignment must
        # move when the cloud rotates, otherwise the invariance tests above
        # would pass vacuously.
        rng = np.random.default_rng(12)
        model = Model(tiny_config(features="absolute", variant="edgeconv"), seed=2)
        pts = random_cloud(rng)
        base = model.predict_logits(pts)
        devs = [np.abs(model.predict_logits(pts @ r.T) - base).max()
                for r in rotations(rng, 5)]
        assert max(devs) > 1e-2

    def test_normalize_mode_stays_invariant(self):
        rng = np.random.default_rng(13)
        model = Model(tiny_config(normalize=True), seed=2)
        pts = random_cloud(rng)
        base = model.predict_logits(pts)
        for rot in rotations(rng, 3):
            assert np.abs(model.predict_logits(pts @ rot.T) - base).max() < 1e-6


class TestPermutationInvariance:
    def test_classification_bitwise(self):
        rng = np.random.default_rng(20)
        model = Model(tiny_config(), seed=3)
        pts = random_cloud(rng)
        base = model.predict_logits(pts)
        for _ in range(4):
            perm = rng.permutation(32)
            assert np.array_equal(model.predict_logits(pts[perm]), base)

    def test_segmentation_rows_follow_points(self):
        rng = np.random.default_rng(21)
        model = Model(tiny_seg_config(), seed=3)
        pts = random_cloud(rng)
        base = model.predict_part_logits(pts, class_label=1)
        perm = rng.permutation(32)
        got = model.predict_part_logits(pts[perm], class_label=1)
        assert np.array_equal(got, base[perm])


class TestGradients:
    def test_every_parameter_reachable(self):
        rng = np.random.default_rng(30)
        model = Model(tiny_config(variant="aeconv1"), seed=4)
        batch = np.stack([random_cloud(rng) for _ in range(2)])
        labels = np.array([0, 2])
        logits, pens = model.classify_batch(batch)
        assert pens, "aeconv1 must produce an orthogonality penalty"
        loss = model.loss_terms(logits, labels, pens)
        ad.backward(loss)
        for name, p in model.params.items():
            assert p.grad is not None, f"no gradient reached {name}"
            assert np.isfinite(p.grad).all(), f"non-finite gradient at {name}"

    def test_segmentation_parameters_reachable(self):
        rng = np.random.default_rng(31)
        model = Model(tiny_seg_config(), seed=4)
        batch = np.stack([random_cloud(rng) for _ in range(2)])
        onehot = np.eye(3)[[0, 1]]
        labels = rng.integers(0, 2, size=(2, 32))
        logits, pens = model.segment_batch(batch, onehot)
        loss = model.loss_terms(logits, labels, pens)
        ad.backward(loss)
        for name, p in model.params.items():
            if name.startswith("head."):
                continue  # classification head is unused by segmentation
            assert p.grad is not None, f"no gradient reached {name}"

    def test_loss_gradient_matches_finite_differences(self):
        # End to end probe on a few coordinates. The feature-space graphs are
        # recomputed inside each evaluation, so this also checks that the
        # chosen step does not flip any neighbor selection.
        rng = np.random.default_rng(32)
        model = Model(tiny_config(), seed=5)
        batch = np.stack([random_cloud(rng) for _ in range(2)])
        labels = np.array([1, 0])

        def run():
            logits, pens = model.classify_batch(batch)
            return model.loss_terms(logits, labels, pens)

        loss = run()
        ad.backward(loss)
        h = 1e-5
        for name in ["sa_first.h.w0", "sa_next1.q.w1", "head.w0"]:
            p = model.params[name]
            flat = p.values.reshape(-1)
            for j in rng.choice(flat.size, size=2, replace=False):
                g = p.grad.reshape(-1)[j]
                keep = flat[j]
                flat[j] = keep + h
                up = run().values.item()
                flat[j] = keep - h
                dn = run().values.item()
                flat[j] = keep
                fd = (up - dn) / (2 * h)
                denom = max(abs(fd), abs(g), 1e-8)
                assert abs(fd - g) / denom < 1e-3, f"{name}[{j}]: fd {fd} vs {g}"

    def test_inference_mode_restores_grad_tracking(self):
        model = Model(tiny_config(), seed=0)
        model.predict_logits(np.random.default_rng(0).normal(size=(32, 3)))
        assert all(p.needs_grad for p in model.params.values())


class TestWeightManagement:
    def test_values_load_round_trip(self):
        rng = np.random.default_rng(40)
        m1 = Model(tiny_config(), seed=6)
        m2 = Model(tiny_config(), seed=7)
        pts = random_cloud(rng)
        assert not np.array_equal(m1.predict_logits(pts), m2.predict_logits(pts))
        m2.load_values(m1.values())
        assert np.array_equal(m1.predict_logits(pts), m2.predict_logits(pts))

    def test_load_rejects_name_mismatch(self):
        m = Model(tiny_config(), seed=0)
        vals = m.values()
        vals["rogue"] = np.zeros(3)
        with pytest.raises(ValueError, match="rogue"):
            m.load_values(vals)

    def test_load_rejects_shape_mismatch(self):
        m = Model(tiny_config(), seed=0)
        vals = m.values()
        vals["head.w0"] = np.zeros((2, 2))
        with pytest.raises(ValueError, match="head.w0"):
            m.load_values(vals)


class TestFunctionalOps:
    def test_pointnet_kernel_single_neighbor(self):
        # A one-point neighborhood pools to the MLP of that single row.
        model = Model(tiny_config(), seed=8)
        row = np.array([[0.1, -0.2, 0.3]])
        got = pointnet_kernel(row, model)
        via = model.h_mlp(ad.constant(row)).values[0]
        assert np.array_equal(got, via)
        assert got.shape == (16,)

    def test_pointnet_kernel_rejects_bad_width(self):
        model = Model(tiny_config(), seed=8)
        with pytest.raises(ValueError, match="k, 3"):
            pointnet_kernel(np.zeros((4, 5)), model)

    def test_sa_first_output(self):
        rng = np.random.default_rng(50)
        cfg = tiny_config()
        model = Model(cfg, seed=9)
        out = sa_first(random_cloud(rng), cfg, model)
        assert isinstance(out, SaOutput)
        assert len(out) == 16
        assert out.features.shape == (16, 16)
        for f in out.frames:
            assert np.allclose(f.basis @ f.basis.T, np.eye(3), atol=1e-9)

    def test_sa_next_quarters_and_widens(self):
        rng = np.random.default_rng(51)
        cfg = tiny_config()
        model = Model(cfg, seed=9)
        first = sa_first(random_cloud(rng), cfg, model)
        out = sa_next(first, cfg, model)
        assert len(out) == 4
        assert out.features.shape == (4, 24)

    def test_sa_next_needs_four_points(self):
        cfg = tiny_config()
        model = Model(cfg, seed=9)
        prev = SaOutput(np.zeros((3, 3)), np.stack([np.eye(3)] * 3),
                        np.zeros((3, 16)))
        with pytest.raises(ValueError, match="at least 4"):
            sa_next(prev, cfg, model)

    def test_aligned_edge_conv_on_self_graph(self):
        rng = np.random.default_rng(52)
        cfg = tiny_config()
        model = Model(cfg, seed=9)
        first = sa_first(random_cloud(rng), cfg, model)
        graph = nb.knn_feature_graph(first.features, k=4)
        out = aligned_edge_conv(first, graph, model, "aeconv3")
        assert out.shape == (16, 24)
        assert np.isfinite(out).all()

    def test_aligned_edge_conv_checks_variant(self):
        rng = np.random.default_rng(53)
        cfg = tiny_config()
        model = Model(cfg, seed=9)
        first = sa_first(random_cloud(rng), cfg, model)
        graph = nb.knn_feature_graph(first.features, k=4)
        with pytest.raises(ValueError, match="aeconv1"):
            aligned_edge_conv(first, graph, model, "aeconv1")

    def test_classify_wrapper_matches_model(self):
        rng = np.random.default_rng(54)
        cfg = tiny_config()
        model = Model(cfg, seed=9)
        pts = random_cloud(rng)
        assert np.array_equal(classify(pts, cfg, model), model.predict_logits(pts))

    def test_classify_accepts_weight_dict(self):
        rng = np.random.default_rng(55)
        cfg = tiny_config()
        model = Model(cfg, seed=9)
        pts = random_cloud(rng)
        got = classify(pts, cfg, model.values())
        assert np.array_equal(got, model.predict_logits(pts))

    def test_segment_wrapper_accepts_label_index(self):
        rng = np.random.default_rng(56)
        cfg = tiny_seg_config()
        model = Model(cfg, seed=9)
        pts = random_cloud(rng)
        via_onehot = segment(pts, np.array([0.0, 1.0, 0.0]), cfg, model)
        via_index = segment(pts, 1, cfg, model)
        assert np.array_equal(via_onehot, via_index)
        assert via_index.shape == (32, 2)


class TestAlignFeature:
    def test_plain_edgeconv_is_identity(self):
        x = np.arange(5.0)
        rot = np.eye(3)
        got = align_feature(x, rot, np.zeros(3), None, "edgeconv")
        assert np.array_equal(got, x)

    def test_aeconv3_shape_and_determinism(self):
        model = Model(tiny_config(variant="aeconv3"), seed=10)
        rng = np.random.default_rng(60)
        x = rng.normal(size=16)
        rot = rotation_from_axis_angle(np.array([0.0, 0.0, 1.0]), 0.4)
        t = rng.normal(size=3)
        a = align_feature(x, rot, t, model, "aeconv3")
        b = align_feature(x, rot, t, model, "aeconv3")
        assert a.shape == (16,)
        assert np.array_equal(a, b)

    def test_aeconv1_applies_predicted_matrix(self):
        model = Model(tiny_config(variant="aeconv1"), seed=10)
        rng = np.random.default_rng(61)
        x = rng.normal(size=16)
        rot = np.eye(3)
        t = np.zeros(3)
        got = align_feature(x, rot, t, model, "aeconv1")
        # Doubling x must double the output: the alignment is linear in x.
        got2 = align_feature(2 * x, rot, t, model, "aeconv1")
        assert np.allclose(got2, 2 * got, atol=1e-12)

    def test_aeconv2_needs_frames(self):
        model = Model(tiny_config(variant="aeconv2"), seed=10)
        with pytest.raises(ValueError, match="frames"):
            align_feature(np.zeros(16), np.eye(3), np.zeros(3), model, "aeconv2")

    def test_aeconv2_with_frames(self):
        model = Model(tiny_config(variant="aeconv2"), seed=10)
        fi = lrfmod.Lrf(origin=np.zeros(3), basis=np.eye(3))
        fj = lrfmod.Lrf(origin=np.ones(3), basis=np.eye(3)[[1, 2, 0]])
        got = align_feature(np.ones(16), np.eye(3), np.zeros(3), model,
                            "aeconv2", frames=(fi, fj))
        assert got.shape == (16,)

    def test_translation_accepts_rir_point(self):
        model = Model(tiny_config(variant="aeconv3"), seed=10)
        rp = lrfmod.RirPoint(coords=np.array([0.1, 0.2, 0.3]),
                             rotation=np.eye(3), reference_index=0,
                             neighbor_index=1)
        a = align_feature(np.ones(16), np.eye(3), rp, model, "aeconv3")
        b = align_feature(np.ones(16), np.eye(3), rp.coords, model, "aeconv3")
        assert np.array_equal(a, b)


class TestFeaturePropagation:
    def test_interpolates_onto_fine_points(self):
        rng = np.random.default_rng(70)
        cfg = tiny_seg_config()
        model = Model(cfg, seed=11)
        coarse = SaOutput(
            ref_points=rng.normal(size=(4, 3)),
            frame_bases=np.stack([np.eye(3)] * 4),
            features=rng.normal(size=(4, 24)),
        )
        fine_pts = rng.normal(size=(10, 3))
        fine_bases = np.stack([np.eye(3)] * 10)
        skip = rng.normal(size=(10, 16))
        out = feature_propagation(coarse, fine_pts, fine_bases, skip, model,
                                  stage=0)
        assert out.shape == (10, 16)
        assert np.isfinite(out).all()

    def test_coincident_point_dominates(self):
        # A fine point sitting exactly on a coarse point gets weights that
        # collapse onto that neighbor (inverse distance with a tiny floor).
        rng = np.random.default_rng(71)
        cfg = tiny_seg_config()
        model = Model(cfg, seed=11)
        coarse_pts = np.array([[0.0, 0, 0], [5.0, 0, 0], [0, 5.0, 0], [0, 0, 5.0]])
        coarse = SaOutput(
            ref_points=coarse_pts,
            frame_bases=np.stack([np.eye(3)] * 4),
            features=rng.normal(size=(4, 24)),
        )
        fine = np.array([[0.0, 0, 0]])
        bases = np.eye(3)[None]
        skip = np.zeros((1, 16))
        out = feature_propagation(coarse, fine, bases, skip, model, stage=0)
        assert np.isfinite(out).all()

    def test_frames_accept_lrf_list(self):
        rng = np.random.default_rng(72)
        cfg = tiny_seg_config()
        model = Model(cfg, seed=11)
        # Stage 1 consumes the width produced by stage 0 (fp_widths[0]).
        coarse = SaOutput(rng.normal(size=(4, 3)), np.stack([np.eye(3)] * 4),
                          rng.normal(size=(4, 16)))
        frames = [lrfmod.Lrf(origin=np.zeros(3), basis=np.eye(3))
                  for _ in range(6)]
        fine = rng.normal(size=(6, 3))
        out = feature_propagation(coarse, fine, frames, None, model, stage=1)
        assert out.shape == (6, 12)


class TestAccounting:
    def test_aeconv1_has_more_parameters_than_aeconv3(self):
        c1 = desk_classification_config()
        c1.variant = "aeconv1"
        c3 = desk_classification_config()
        c3.variant = "aeconv3"
        n1 = count_parameters(c1)
        n3 = count_parameters(c3)
        assert n1 > n3

    def test_parameter_count_matches_arrays(self):
        model = Model(tiny_config(), seed=0)
        total = sum(v.size for v in model.values().values())
        assert model.parameter_count() == total == count_parameters(tiny_config())

    def test_operation_counts_positive_and_ordered(self):
        c1 = tiny_config(variant="aeconv1")
        c3 = tiny_config(variant="aeconv3")
        ce = tiny_config(variant="edgeconv")
        ops1 = count_operations(c1)
        ops3 = count_operations(c3)
        opse = count_operations(ce)
        assert ops1["total_macs"] > ops3["total_macs"] > opse["total_macs"]
        assert ops1["flops"] == 2 * ops1["total_macs"]

    def test_segmentation_sections_counted(self):
        ops = count_operations(tiny_seg_config())
        assert "fp1" in ops and "fp2" in ops and "point_head" in ops
        assert all(v > 0 for v in ops.values())


class TestLrfFallbackSurfacing:
    def test_degenerate_neighborhoods_counted_not_fatal(self):
        # A cloud with a tight duplicate cluster forces at least one frame
        # through the fallback path; the forward pass must still finish.
        cfg = tiny_config()
        model = Model(cfg, seed=12)
        rng = np.random.default_rng(80)
        pts = random_cloud(rng)
        pts[1:9] = pts[0]  # 9 coincident points
        logits = model.predict_logits(pts)
        assert np.isfinite(logits).all()
        assert sum(model.lrf_fallbacks.values()) > 0


def test_as_model_passthrough():
    cfg = tiny_config()
    model = Model(cfg, seed=0)
    assert as_model(cfg, model) is model
    fresh = as_model(cfg, None, seed=0)
    assert np.array_equal(
        fresh.params["head.w0"].values, model.params["head.w0"].values
    )


def test_variant_parse():
    assert AlignVariant.from_name("EdgeConv") is AlignVariant.PLAIN_EDGECONV
    assert AlignVariant.from_name(AlignVariant.AECONV2) is AlignVariant.AECONV2
    with pytest.raises(ValueError, match="unknown align variant"):
        AlignVariant.from_name("conv9000")
