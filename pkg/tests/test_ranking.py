import json

import numpy as np
import pytest

from diffurank.ranking import (
    CaptionCandidate,
    RankingError,
    RankingResult,
    RenderedView,
    bottom_views,
    rank_views,
    ranking_record,
    read_ranking_records,
    write_ranking_records,
)
from diffurank.render import ViewStrategy
from diffurank.scoring import LossMode, ObjectLatent, ScoringConfig


def make_views(n):
    return [RenderedView(view_id=i, strategy=ViewStrategy.GREY_RAYTRACE) for i in range(n)]


def make_captions(num_views, per_view=2):
    return [
        CaptionCandidate(view_id=v, caption_index=j, text=f"view {v} caption {j}")
        for v in range(num_views)
        for j in range(per_view)
    ]


class ConstantDenoiser:
    """Same prediction always: every group ties."""

    prediction_target = LossMode.X0_PREDICTION

    def __init__(self, vector):
        self._vector = np.asarray(vector, dtype=np.float64)

    def denoise(self, noised, t, text):
        return self._vector


class ScriptedDenoiser:
    """Loss depends only on which view's caption is being scored."""

    prediction_target = LossMode.X0_PREDICTION

    def __init__(self, vector, view_loss):
        self._vector = np.asarray(vector, dtype=np.float64)
        self._view_loss = view_loss

    def denoise(self, noised, t, text):
        view_id = int(text.split()[1])
        d = self._vector.size
        bump = np.zeros(d)
        bump[0] = np.sqrt(d * self._view_loss[view_id])
        return self._vector + bump


@pytest.fixture()
def obj_latent(rng):
    return ObjectLatent(object_id="obj", vector=rng.standard_normal(6))


class TestRankViews:
    def test_single_view_is_selected(self, obj_latent):
        result = rank_views(obj_latent, make_views(1), make_captions(1),
                            ScoringConfig(seed=0), ConstantDenoiser(obj_latent.vector), p=6)
        assert result.selected == (0,)

    def test_all_ties_break_by_ascending_view_id(self, obj_latent):
        result = rank_views(obj_latent, make_views(3), make_captions(3),
                            ScoringConfig(seed=0), ConstantDenoiser(obj_latent.vector), p=2)
        assert result.selected == (0, 1)
        assert [v for v, _ in result.ordered_views] == [0, 1, 2]

    def test_orders_by_score_descending(self, obj_latent):
        den = ScriptedDenoiser(obj_latent.vector, {0: 0.9, 1: 0.1, 2: 0.5})
        result = rank_views(obj_latent, make_views(3), make_captions(3),
                            ScoringConfig(seed=0), den, p=3)
        assert [v for v, _ in result.ordered_views] == [1, 2, 0]
        scores = [s for _, s in result.ordered_views]
        assert scores == sorted(scores, reverse=True)

    def test_captionless_view_excluded_with_warning(self, obj_latent):
        captions = [c for c in make_captions(3) if c.view_id != 1]
        result = rank_views(obj_latent, make_views(3), captions,
                            ScoringConfig(seed=0), ConstantDenoiser(obj_latent.vector), p=3)
        assert result.excluded_views == (1,)
        assert 1 not in [v for v, _ in result.ordered_views]

    def test_all_views_captionless_is_hard_error(self, obj_latent):
        with pytest.raises(RankingError, match="no view"):
            rank_views(obj_latent, make_views(3), [],
                       ScoringConfig(seed=0), ConstantDenoiser(obj_latent.vector), p=1)

    def test_unknown_view_reference_rejected(self, obj_latent):
        captions = [CaptionCandidate(view_id=9, caption_index=0, text="stray")]
        with pytest.raises(RankingError, match="unknown view"):
            rank_views(obj_latent, make_views(2), captions,
                       ScoringConfig(seed=0), ConstantDenoiser(obj_latent.vector), p=1)

    def test_p_below_one_rejected(self, obj_latent):
        with pytest.raises(RankingError):
            rank_views(obj_latent, make_views(2), make_captions(2),
                       ScoringConfig(seed=0), ConstantDenoiser(obj_latent.vector), p=0)

    def test_caption_shuffle_leaves_scores_unchanged(self, toy_world, blend_denoiser):
        obj = toy_world.objects[3]
        views = [RenderedView(v.view_id, ViewStrategy.GREY_RAYTRACE) for v in toy_world.views]
        captions = list(toy_world.captions[obj.object_id])
        config = ScoringConfig(num_samples=5, seed=17)
        forward = rank_views(obj.latent, views, captions, config, blend_denoiser, p=3)
        shuffled = list(reversed(captions))
        backward = rank_views(obj.latent, views, shuffled, config, blend_denoiser, p=3)
        assert forward.ordered_views == backward.ordered_views

    def test_monotone_transform_leaves_selection_unchanged(self, obj_latent):
        den = ScriptedDenoiser(obj_latent.vector, {0: 0.9, 1: 0.1, 2: 0.5, 3: 0.2})
        result = rank_views(obj_latent, make_views(4), make_captions(4),
                            ScoringConfig(seed=0), den, p=2)
        transformed = sorted(
            ((vid, np.tanh(3.0 * score) + 7.0) for vid, score in result.ordered_views),
            key=lambda pair: (-pair[1], pair[0]),
        )
        assert [v for v, _ in transformed][:2] == list(result.selected)


class TestBottomViews:
    def _ranked(self, n, view_loss=None):
        ordered = tuple(
            (vid, -float(view_loss[vid]) if view_loss else 0.0) for vid in range(n)
        )
        ordered = tuple(sorted(ordered, key=lambda p: (-p[1], p[0])))
        return RankingResult(object_id="o", ordered_views=ordered, top_p=6,
                             selected=tuple(v for v, _ in ordered[:6]))

    def test_full_reversal(self):
        result = self._ranked(6, {i: i for i in range(6)})
        assert bottom_views(result, 6) == [v for v, _ in result.ordered_views][::-1]

    def test_bottom_six_of_twentyeight(self):
        result = self._ranked(28, {i: i for i in range(28)})
        worst = bottom_views(result, 6)
        ranked_ids = [v for v, _ in result.ordered_views]
        assert worst == ranked_ids[-1:-7:-1]
        assert len(worst) == 6

    def test_all_ties_selects_highest_view_ids(self):
        # Tie-break puts low ids first, so the bottom is the highest ids.
        result = self._ranked(4)
        assert bottom_views(result, 2) == [3, 2]

    def test_top_bottom_disjoint_when_2p_at_most_m(self, obj_latent):
        den = ScriptedDenoiser(obj_latent.vector, {i: 0.1 * i for i in range(8)})
        result = rank_views(obj_latent, make_views(8), make_captions(8),
                            ScoringConfig(seed=0), den, p=4)
        assert set(result.selected).isdisjoint(bottom_views(result, 4))


class TestRankingRecords:
    def test_round_trip(self, tmp_path, obj_latent):
        den = ScriptedDenoiser(obj_latent.vector, {0: 0.9, 1: 0.1})
        views = make_views(2)
        result = rank_views(obj_latent, views, make_captions(2),
                            ScoringConfig(seed=0), den, p=1)
        record = ranking_record(result, views)
        path = tmp_path / "rankings.jsonl"
        write_ranking_records(path, [record])
        loaded = read_ranking_records(path)
        assert loaded == [json.loads(json.dumps(record))]
        assert loaded[0]["ordered"][0]["strategy"] == "grey_raytrace"
