import json

import numpy as np
import pytest

from minisvs import corpus, dsp, fileio, rvq, train
from minisvs.autodiff import NumericalError
from minisvs.config import ConfigError, config_from_dict

# trimmed sizes: these tests exercise plumbing, not model quality
FAST = {
    "mel_bins": 48,
    "width": 24,
    "embed_dim": 24,
    "time_dim": 16,
    "latent_dim": 8,
    "quantizers": 4,
    "codebook_size": 24,
    "window": 64,
    "batch": 2,
    "feature_dim": 16,
}


@pytest.fixture(scope="module")
def cfg():
    return config_from_dict(dict(FAST))


@pytest.fixture(scope="module")
def corpus_dir(tmp_path_factory, cfg):
    out = tmp_path_factory.mktemp("corpus")
    corpus.gen_corpus(out, 2, seed=0, cfg=cfg)
    return out


@pytest.fixture(scope="module")
def codec_ckpt(tmp_path_factory, cfg, corpus_dir):
    out = tmp_path_factory.mktemp("codec")
    ckpt, _ = train.train_codec(cfg, corpus_dir, out, steps=30, seed=0)
    return ckpt


@pytest.fixture(scope="module")
def latent_ckpt(tmp_path_factory, cfg, corpus_dir, codec_ckpt):
    out = tmp_path_factory.mktemp("latent")
    ckpt, _ = train.train_latent(cfg, corpus_dir, codec_ckpt, out, steps=30, seed=0)
    return ckpt


class TestCodecTraining:
    def test_log_schema_and_finite_losses(self, cfg, corpus_dir, tmp_path):
        _, log = train.train_codec(cfg, corpus_dir, tmp_path, steps=5, seed=1)
        data = train.read_loss_log(log)
        assert list(data) == train.CODEC_LOG_HEADER
        for name in ("recon", "emb", "lyrics", "note", "total", "grad_norm"):
            assert np.all(np.isfinite(data[name]))
        assert data["step"].tolist() == [0, 1, 2, 3, 4]

    def test_total_equals_recon_when_other_weights_zero(self, corpus_dir, tmp_path):
        cfg = config_from_dict(
            dict(
                FAST,
                loss={"recon": 1.0, "emb": 0.0, "fm": 0.0, "lyrics": 0.0, "note": 0.0},
            )
        )
        _, log = train.train_codec(cfg, corpus_dir, tmp_path, steps=4, seed=2)
        data = train.read_loss_log(log)
        assert np.array_equal(data["total"], data["recon"])

    def test_resume_reproduces_steps_bit_exactly(self, cfg, corpus_dir, tmp_path):
        full_dir = tmp_path / "full"
        ck_full, log_full = train.train_codec(cfg, corpus_dir, full_dir, steps=8, seed=3)
        half_dir = tmp_path / "half"
        ck_half, _ = train.train_codec(cfg, corpus_dir, half_dir, steps=4, seed=3)
        resumed_dir = tmp_path / "resumed"
        ck_res, log_res = train.train_codec(
            cfg, corpus_dir, resumed_dir, steps=8, seed=3, resume=ck_half
        )
        full = train.read_loss_log(log_full)
        res = train.read_loss_log(log_res)
        assert res["step"].tolist() == [4, 5, 6, 7]
        for name in train.CODEC_LOG_HEADER:
            assert np.array_equal(full[name][4:], res[name])
        a, _ = fileio.load_checkpoint(ck_full)
        b, _ = fileio.load_checkpoint(ck_res)
        assert set(a) == set(b)
        for name in a:
            assert np.array_equal(a[name], b[name]), name

    def test_same_seed_bit_identical_checkpoints(self, cfg, corpus_dir, tmp_path):
        ck1, _ = train.train_codec(cfg, corpus_dir, tmp_path / "r1", steps=5, seed=4)
        ck2, _ = train.train_codec(cfg, corpus_dir, tmp_path / "r2", steps=5, seed=4)
        a, _ = fileio.load_checkpoint(ck1)
        b, _ = fileio.load_checkpoint(ck2)
        for name in a:
            assert np.array_equal(a[name], b[name])

    def test_adversarial_flag_populates_gan_columns(self, cfg, corpus_dir, tmp_path):
        _, log = train.train_codec(cfg, corpus_dir, tmp_path, steps=4, seed=5, adversarial=True)
        data = train.read_loss_log(log)
        assert np.all(data["adv"] > 0)
        assert np.all(data["fm"] > 0)

    def test_divergence_aborts_with_step_number(self, corpus_dir, tmp_path):
        cfg = config_from_dict(dict(FAST, lr=1e8))
        with np.errstate(all="ignore"), pytest.raises(NumericalError, match="step"):
            train.train_codec(cfg, corpus_dir, tmp_path, steps=60, seed=6)


class TestLatentTraining:
    def test_log_schema(self, cfg, corpus_dir, codec_ckpt, tmp_path):
        _, log = train.train_latent(cfg, corpus_dir, codec_ckpt, tmp_path, steps=5, seed=1)
        data = train.read_loss_log(log)
        assert list(data) == train.LATENT_LOG_HEADER
        assert np.all(np.isfinite(data["diff"]))
        assert np.all(data["prior"] != 0)

    def test_supervised_only_has_no_contrastive_terms(self, cfg, corpus_dir, codec_ckpt, tmp_path):
        _, log = train.train_latent(
            cfg, corpus_dir, codec_ckpt, tmp_path, steps=6, seed=2, unlabeled_ratio=0.0
        )
        data = train.read_loss_log(log)
        assert np.all(data["cont_lyrics"] == 0.0)
        assert np.all(data["cont_melody"] == 0.0)
        assert np.all(data["grad_norm_unsup"] == 0.0)

    def test_unlabeled_ratio_trains_both_paths(self, cfg, corpus_dir, codec_ckpt, tmp_path):
        _, log = train.train_latent(
            cfg, corpus_dir, codec_ckpt, tmp_path, steps=12, seed=3, unlabeled_ratio=0.5
        )
        data = train.read_loss_log(log)
        assert (data["grad_norm_unsup"] > 0).any()
        assert (data["grad_norm_sup"] > 0).any()
        assert (data["cont_lyrics"] != 0.0).any()

    def test_contrastive_training_aligns_paired_representations(
        self, cfg, corpus_dir, codec_ckpt, tmp_path
    ):
        ckpt, _ = train.train_latent(
            cfg, corpus_dir, codec_ckpt, tmp_path, steps=500, seed=0, unlabeled_ratio=0.5
        )
        models, _, meta, _ = train.load_latent_checkpoint(ckpt)
        songs, _ = corpus.load_corpus(corpus_dir, cfg)
        paired = [i for i in range(len(songs)) if i not in set(meta["unlabeled_songs"])]
        song = songs[paired[0]]

        def mean_cos(a, b):
            a, b = a.data, b.data
            num = (a * b).sum(axis=1)
            den = np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1)
            return float((num / den).mean())

        lyr = mean_cos(models.cond.lyrics_repr(song.grid), models.cond.lyrics_u_repr(song.features))
        mel = mean_cos(models.cond.melody_repr(song.grid), models.cond.melody_u_repr(song.f0_quant))
        assert lyr > 0.8 and mel > 0.8

    def test_standard_prior_drops_prior_loss(self, cfg, corpus_dir, codec_ckpt, tmp_path):
        _, log = train.train_latent(
            cfg, corpus_dir, codec_ckpt, tmp_path, steps=5, seed=4, prior_mode="standard"
        )
        data = train.read_loss_log(log)
        assert np.all(data["prior"] == 0.0)

    def test_frozen_codec_bytes_untouched(self, cfg, corpus_dir, codec_ckpt, tmp_path):
        before = open(codec_ckpt, "rb").read()
        before_manifest = open(str(codec_ckpt) + ".json", "rb").read()
        train.train_latent(cfg, corpus_dir, codec_ckpt, tmp_path, steps=5, seed=5)
        assert open(codec_ckpt, "rb").read() == before
        assert open(str(codec_ckpt) + ".json", "rb").read() == before_manifest

    def test_resume_bit_exact(self, cfg, corpus_dir, codec_ckpt, tmp_path):
        ck_full, log_full = train.train_latent(
            cfg, corpus_dir, codec_ckpt, tmp_path / "f", steps=8, seed=6
        )
        ck_half, _ = train.train_latent(
            cfg, corpus_dir, codec_ckpt, tmp_path / "h", steps=4, seed=6
        )
        ck_res, log_res = train.train_latent(
            cfg, corpus_dir, codec_ckpt, tmp_path / "r", steps=8, seed=6, resume=ck_half
        )
        full = train.read_loss_log(log_full)
        res = train.read_loss_log(log_res)
        for name in train.LATENT_LOG_HEADER:
            assert np.array_equal(full[name][4:], res[name])
        a, _ = fileio.load_checkpoint(ck_full)
        b, _ = fileio.load_checkpoint(ck_res)
        for name in a:
            assert np.array_equal(a[name], b[name]), name

    def test_incompatible_config_rejected(self, corpus_dir, codec_ckpt, tmp_path):
        bad = config_from_dict(dict(FAST, latent_dim=6))
        with pytest.raises(ConfigError, match="latent_dim"):
            train.train_latent(bad, corpus_dir, codec_ckpt, tmp_path, steps=2, seed=0)

    def test_bad_modes_rejected(self, cfg, corpus_dir, codec_ckpt, tmp_path):
        with pytest.raises(ConfigError):
            train.train_latent(cfg, corpus_dir, codec_ckpt, tmp_path, steps=2, prior_mode="x")
        with pytest.raises(ConfigError):
            train.train_latent(cfg, corpus_dir, codec_ckpt, tmp_path, steps=2, target_kind="x")
        with pytest.raises(ConfigError):
            train.train_latent(cfg, corpus_dir, codec_ckpt, tmp_path, steps=2, unlabeled_ratio=2.0)


class TestCodecFileCommands:
    def test_encode_decode_matches_in_memory_forward(self, cfg, corpus_dir, codec_ckpt, tmp_path):
        wav = str(corpus_dir / "song000.wav")
        bits = tmp_path / "song0.hsc"
        train.encode_wav(codec_ckpt, wav, bits)
        mel_path = tmp_path / "song0.mel.f32"
        decoded = train.decode_bitstream(codec_ckpt, bits, mel_path)
        models, ccfg, _ = train.load_codec_checkpoint(codec_ckpt)
        lm = corpus.log_mel(dsp.load_wav(wav), ccfg)
        z = models.encoder(lm).data.astype(np.float64)
        direct = np.clip(
            np.expm1(models.decoder(rvq.quantize(models.coder, z).astype(np.float32)).data),
            0.0,
            None,
        )
        assert np.abs(direct - decoded).max() < 1e-7
        on_disk, meta = fileio.load_matrix(mel_path)
        assert meta["kind"] == "mel"
        assert on_disk.shape == decoded.shape

    def test_truncated_decode_distortion_monotone_in_latent_space(
        self, cfg, corpus_dir, codec_ckpt, tmp_path
    ):
        models, ccfg, _ = train.load_codec_checkpoint(codec_ckpt)
        songs, _ = corpus.load_corpus(corpus_dir, ccfg)
        z = models.encoder(songs[0].logmel).data.astype(np.float64)
        codes = rvq.encode(models.coder, z)
        errs = [
            float(((z - rvq.decode(models.coder, codes, c)) ** 2).mean())
            for c in range(1, ccfg.quantizers + 1)
        ]
        for a, b in zip(errs, errs[1:]):
            assert b <= a + 1e-12

    def test_wrong_sample_rate_rejected(self, cfg, codec_ckpt, tmp_path):
        buf = dsp.synth_tone([(440.0, 0.4, 0.0, 0.3)], 16000)
        wav = tmp_path / "wrong_sr.wav"
        dsp.save_wav(wav, buf)
        with pytest.raises(ConfigError):
            train.encode_wav(codec_ckpt, wav, tmp_path / "x.hsc")


class TestSampling:
    def test_same_seed_identical_outputs(self, corpus_dir, codec_ckpt, latent_ckpt, tmp_path):
        score = str(corpus_dir / "song000.score.json")
        out = []
        for name in ("a", "b"):
            lat, mel, rep = train.sample_score(
                score, codec_ckpt, latent_ckpt, tmp_path / name, steps=8, tau=1.5, seed=9
            )
            out.append((open(lat, "rb").read(), open(mel, "rb").read()))
        assert out[0] == out[1]

    def test_report_schema_and_frame_count(self, corpus_dir, codec_ckpt, latent_ckpt, tmp_path):
        score_path = str(corpus_dir / "song001.score.json")
        _, mel_path, rep_path = train.sample_score(
            score_path, codec_ckpt, latent_ckpt, tmp_path, steps=8, tau=1.0, seed=0
        )
        report = json.loads(open(rep_path).read())
        models, lcfg, meta, _ = train.load_latent_checkpoint(latent_ckpt)
        from minisvs import condition as cond

        table = {k: int(v) for k, v in meta["phoneme_table"].items()}
        score = cond.load_score(score_path, table)
        grid = cond.expand_score(score, lcfg.hop_size, lcfg.sample_rate)
        assert report["frames"] == grid.frames
        mel, _ = fileio.load_matrix(mel_path)
        assert mel.shape[0] == grid.frames
        assert report["init_noise_variance"] == 1.0
        assert report["notes_scored"] == sum(1 for m in grid.note_midi if m > 0)

    def test_tau_variance_logged_ratio(self, corpus_dir, codec_ckpt, latent_ckpt, tmp_path):
        score = str(corpus_dir / "song000.score.json")
        reports = {}
        for tau in (1.0, 1.5):
            _, _, rep = train.sample_score(
                score, codec_ckpt, latent_ckpt, tmp_path / f"t{tau}", steps=6, tau=tau, seed=1
            )
            reports[tau] = json.loads(open(rep).read())
        ratio = reports[1.0]["init_noise_variance"] / reports[1.5]["init_noise_variance"]
        assert abs(ratio - 1.5) < 1e-12

    def test_zq_projection_target(self, corpus_dir, codec_ckpt, latent_ckpt, tmp_path):
        score = str(corpus_dir / "song000.score.json")
        lat, _, _ = train.sample_score(
            score, codec_ckpt, latent_ckpt, tmp_path, steps=6, tau=1.5, seed=2, target_kind="zq"
        )
        models, ccfg, _ = train.load_codec_checkpoint(codec_ckpt)
        z, _ = fileio.load_matrix(lat)
        # latent file holds the raw sampled z0; decode used its projection
        assert z.shape[1] == ccfg.latent_dim

    def test_frame_overflow_rejected(self, corpus_dir, codec_ckpt, latent_ckpt, tmp_path):
        table = json.loads(open(corpus_dir / "phonemes.json").read())
        score = {
            "tempo": 120,
            "syllables": [
                {"onset": None, "nucleus": "a", "coda": None, "midi": 69, "dur_s": 60.0}
            ]
            * 20,
        }
        path = tmp_path / "huge.json"
        path.write_text(json.dumps(score))
        with pytest.raises(ConfigError, match="frames"):
            train.sample_score(path, codec_ckpt, latent_ckpt, tmp_path, steps=4, seed=0)


class TestEvaluateFiles:
    def test_wav_self_comparison_is_perfect(self, cfg, corpus_dir, tmp_path):
        wav = str(corpus_dir / "song000.wav")
        report = train.evaluate_files(wav, wav, tmp_path / "r.json", cfg)
        assert report.mae == 0.0
        assert report.pitch_cents_rmse == 0.0
        assert report.periodicity_rmse == 0.0
        assert report.vuv_f1 == 1.0
        payload = json.loads((tmp_path / "r.json").read_text())
        assert set(payload) == {
            "mae",
            "pitch_cents_rmse",
            "periodicity_rmse",
            "vuv_f1",
            "frames_compared",
        }

    def test_octave_shift_is_1200_cents(self, cfg, tmp_path):
        a = dsp.synth_tone([(220.0, 0.4, 0.0, 1.0)], 24000)
        b = dsp.synth_tone([(440.0, 0.4, 0.0, 1.0)], 24000)
        pa, pb = tmp_path / "a.wav", tmp_path / "b.wav"
        dsp.save_wav(pa, a)
        dsp.save_wav(pb, b)
        report = train.evaluate_files(pa, pb, tmp_path / "r.json", cfg)
        assert abs(report.pitch_cents_rmse - 1200.0) < 10.0

    def test_pitch_json_override(self, cfg, corpus_dir, tmp_path):
        wav = str(corpus_dir / "song000.wav")
        track = dsp.estimate_f0(dsp.load_wav(wav), dsp.StftConfig(cfg.fft_size, cfg.win_size, cfg.hop_size))
        shifted = dsp.PitchTrack(track.f0 * 2.0, track.periodicity)
        pj = tmp_path / "p.json"
        dsp.save_pitch_json(pj, shifted)
        report = train.evaluate_files(wav, wav, tmp_path / "r.json", cfg, pred_pitch=pj)
        assert abs(report.pitch_cents_rmse - 1200.0) < 1e-6

    def test_length_mismatch_cites_policy(self, cfg, tmp_path):
        a = dsp.synth_tone([(220.0, 0.4, 0.0, 1.0)], 24000)
        b = dsp.synth_tone([(220.0, 0.4, 0.0, 0.5)], 24000)
        pa, pb = tmp_path / "a.wav", tmp_path / "b.wav"
        dsp.save_wav(pa, a)
        dsp.save_wav(pb, b)
        with pytest.raises(ValueError, match="alignment"):
            train.evaluate_files(pa, pb, tmp_path / "r.json", cfg)

    def test_mel_matrix_inputs(self, cfg, corpus_dir, codec_ckpt, tmp_path):
        wav = str(corpus_dir / "song000.wav")
        bits = tmp_path / "b.hsc"
        train.encode_wav(codec_ckpt, wav, bits)
        mel_path = tmp_path / "m.f32"
        train.decode_bitstream(codec_ckpt, bits, mel_path)
        report = train.evaluate_files(mel_path, mel_path, tmp_path / "r.json", cfg)
        assert report.mae == 0.0 and report.vuv_f1 in (0.0, 1.0)
