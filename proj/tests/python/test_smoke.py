import math

import numpy as np
import pytest

import fsda


def test_version_and_constants():
    assert fsda.__version__ == "0.1.0"
    assert fsda.IGNORE_LABEL == 255


def test_cosine_closed_form():
    assert fsda.cosine_similarity([1.0, 0.0], [1.0, 1.0]) == pytest.approx(1 / math.sqrt(2), abs=1e-12)
    assert fsda.cosine_similarity([0.0, 0.0], [1.0, 1.0]) == 0.0


def test_remap_round_trip():
    support = np.array([[2, 5], [9, 255]], dtype=np.uint8)
    query = np.array([[0, 5], [9, 11]], dtype=np.uint8)
    s, q, class_set = fsda.remap_episode_labels(support, query)
    assert class_set == [2, 5, 9]
    assert s.tolist() == [[0, 1], [2, 255]]
    assert q.tolist() == [[255, 1], [2, 255]]


def test_prototype_pipeline():
    rng = np.random.default_rng(0)
    features = rng.normal(size=(4, 4, 8))
    mask = np.zeros((4, 4), dtype=np.uint8)
    mask[2:, :] = 3
    protos, vanished = fsda.extract_prototypes(features, mask)
    assert sorted(protos) == [0, 3]
    assert vanished == []
    np.testing.assert_allclose(protos[3], features[2:].reshape(-1, 8).mean(axis=0), atol=1e-12)

    scores, order = fsda.score_map(features, protos)
    assert order == [0, 3]
    assert np.all(np.abs(scores) <= 1.0)
    probs = fsda.prototype_softmax(scores, 20.0)
    np.testing.assert_allclose(probs.sum(axis=2), 1.0, atol=1e-12)
    labels = fsda.predict_labels(scores, order, 8, 8)
    assert labels.shape == (8, 8)
    assert set(np.unique(labels)) <= {0, 3}


def test_softmax_closed_form():
    p = fsda.prototype_softmax(np.array([[[1.0, -1.0]]]), 1.0)
    assert p[0, 0, 0] == pytest.approx(math.e / (math.e + 1 / math.e), abs=1e-12)


def test_losses_and_schedule():
    probs = np.full((2, 2, 4), 0.25)
    mask = np.array([[0, 1], [2, 255]], dtype=np.uint8)
    assert fsda.cross_entropy_loss(probs, mask) == pytest.approx(math.log(4), abs=1e-12)
    with pytest.raises(ValueError):
        fsda.cross_entropy_loss(probs, np.full((2, 2), 255, dtype=np.uint8))
    assert fsda.poly_lr(0.001, 50, 100, 0.9) == pytest.approx(0.001 * 0.5**0.9, rel=1e-12)


def test_miou_hand_case():
    report = fsda.miou(np.array([[3, 1], [1, 3]]))
    assert report["miou"] == pytest.approx(0.6, abs=1e-15)
    assert report["per_class_iou"] == pytest.approx([0.6, 0.6])


def test_support_set_first_image_saturates():
    masks = [np.array([[0, 1]], dtype=np.uint8)] * 3
    out = fsda.construct_support_set(masks, 1, 4, 0)
    assert len(out["indices"]) == 1
    assert out["occurrence"] == [1, 1, 0, 0]
    assert out["unsaturated"] == [2, 3]


def test_model_encode_and_segment(tmp_path):
    samples = fsda.generate_synthetic_domain("target", 2)
    image, mask, name = samples[0]
    assert image.shape == (128, 128, 3) and mask.shape == (128, 128)

    model = fsda.Model(seed=1)
    features = model.encode(image)
    assert features.shape == (16, 16, model.output_dim)
    np.testing.assert_array_equal(features, model.encode(image))

    small = mask[::8, ::8]
    protos, _ = fsda.extract_prototypes(features, small)
    predicted = fsda.segment_image(model, protos, image)
    assert predicted.shape == mask.shape

    loss = fsda.episode_loss(model, image, mask, samples[1][0], samples[1][1], alpha=0.2)
    assert loss["loss_total"] == pytest.approx(loss["loss_query"] + 0.2 * loss["loss_support"], abs=1e-9)

    path = str(tmp_path / "m.ckpt")
    model.save(path)
    assert fsda.Model.load(path) == model
