# Copyright 2026 The fastsep Authors
# License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)
"""Train a small auxiliary-classifier CVAE on a fastsep toy corpus and export
it as an FMVAE01 weight bundle.

The corpus directory is the output of ``fastsep make-corpus``. Layer semantics
mirror the C++ runtime exactly (Conv1d, ConvTranspose1d, inference-mode
BatchNorm1d, GLU over channels, log compression), so the exported bundle runs
unchanged in ``fastsep separate --method fmvae``.

Example::

    fastsep make-corpus --out /tmp/train --classes 4 --per-class 60 --seed 1
    fastsep make-corpus --out /tmp/test --classes 4 --per-class 15 --seed 2
    python3 trainer/train_toy_bundle.py --train /tmp/train --test /tmp/test \\
        --out tests/fixtures/toy_bundle.fmvae
"""

import argparse
import json
import math
import struct
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy.io import wavfile

MAGIC = b"FMVAE01\0"
LOG_EPS = 1e-6


# ---------------------------------------------------------------------------
# Signal front end (matches fastsep::stft)

def hamming(win):
    n = np.arange(win)
    return 0.54 - 0.46 * np.cos(2.0 * np.pi * n / win)


def stft(x, win=4096, hop=2048):
    n_frames = max(1, -(-len(x) // hop))
    lead = win - hop
    padded = np.zeros(lead + n_frames * hop + win)
    padded[lead:lead + len(x)] = x
    w = hamming(win)
    frames = np.stack([padded[n * hop:n * hop + win] * w for n in range(n_frames)])
    return np.fft.rfft(frames, axis=1).T  # bins x frames


def unit_mean(p):
    return p / p.mean()


def load_corpus(path):
    meta = json.loads((Path(path) / "corpus.json").read_text())
    waves, labels = [], []
    for item in meta["items"]:
        sr, x = wavfile.read(Path(path) / item["file"])
        assert sr == meta["sample_rate"]
        waves.append(x.astype(np.float64))
        labels.append(item["label"])
    return waves, np.array(labels), meta


# ---------------------------------------------------------------------------
# Networks. Each layer records the hyperparameters the manifest needs.

class CondConv(nn.Module):
    def __init__(self, cin, cout, k, stride=1, pad=0, concat=False, transpose=False, classes=0):
        super().__init__()
        self.concat, self.transpose = concat, transpose
        self.cin = cin + (classes if concat else 0)
        self.cout, self.k, self.stride, self.pad = cout, k, stride, pad
        op = nn.ConvTranspose1d if transpose else nn.Conv1d
        self.op = op(self.cin, cout, k, stride=stride, padding=pad)

    def forward(self, x, c):
        if self.concat:
            x = torch.cat([x, c[:, :, None].expand(-1, -1, x.shape[2])], dim=1)
        return self.op(x)

    def manifest(self):
        d = {"kind": "deconv1d" if self.transpose else "conv1d", "in_channels": self.cin,
             "out_channels": self.cout, "kernel": self.k, "stride": self.stride, "padding": self.pad,
             "bias": True, "concat_class": self.concat}
        if self.transpose:
            d["output_padding"] = 0
        return d

    def tensors(self):
        return [("weight", self.op.weight), ("bias", self.op.bias)]


class BN(nn.BatchNorm1d):
    def forward(self, x, c):
        return super().forward(x)

    def manifest(self):
        return {"kind": "batchnorm", "channels": self.num_features, "eps": self.eps}

    def tensors(self):
        return [("weight", self.weight), ("bias", self.bias),
                ("running_mean", self.running_mean), ("running_var", self.running_var)]


class GLU(nn.Module):
    def forward(self, x, c):
        return F.glu(x, dim=1)

    def manifest(self):
        return {"kind": "glu"}

    def tensors(self):
        return []


class Log(nn.Module):
    def forward(self, x, c):
        return torch.log(x + LOG_EPS)

    def manifest(self):
        return {"kind": "log", "eps": LOG_EPS}

    def tensors(self):
        return []


class Net(nn.Module):
    def __init__(self, in_channels, layers):
        super().__init__()
        self.in_channels = in_channels
        self.layers = nn.ModuleList(layers)

    def forward(self, x, c):
        for layer in self.layers:
            x = layer(x, c)
        return x


def build(freq, classes, latent, hidden):
    C, H = classes, hidden
    cc = dict(classes=C, concat=True)
    encoder = Net(freq, [
        Log(),
        CondConv(freq, 2 * H, 1, **cc), BN(2 * H), GLU(),
        CondConv(H, 2 * H, 5, 2, 2, **cc), BN(2 * H), GLU(),
        CondConv(H, 2 * latent, 5, 1, 2, **cc),
    ])
    decoder = Net(latent, [
        CondConv(latent, 2 * H, 5, 1, 2, transpose=True, **cc), BN(2 * H), GLU(),
        CondConv(H, 2 * H, 4, 2, 1, transpose=True, **cc), BN(2 * H), GLU(),
        CondConv(H, freq, 1, **cc),
    ])
    classifier = Net(freq, [
        Log(),
        CondConv(freq, 2 * H, 1), BN(2 * H), GLU(),
        CondConv(H, 2 * H, 5, 2, 2), BN(2 * H), GLU(),
        CondConv(H, C, 5, 1, 2),
    ])
    return encoder, decoder, classifier


def fit_frames(y, n):
    """Crop or edge-extend the time axis to n frames."""
    if y.shape[2] >= n:
        return y[:, :, :n]
    return torch.cat([y, y[:, :, -1:].expand(-1, -1, n - y.shape[2])], dim=2)


def init_decoder_output(dec, powers, labels, classes, hidden):
    """Start the output layer at the per-class log-mean spectra.

    Log-variances of spectral valleys sit far below zero; Adam moves a bias by
    at most about lr per step, so a zero start would not reach them.
    """
    logmean = [np.log(np.mean([unit_mean(p) for p, y in zip(powers, labels) if y == c], axis=0).mean(axis=1) + LOG_EPS)
               for c in range(classes)]
    base = np.mean(logmean, axis=0)
    out = dec.layers[-1].op
    with torch.no_grad():
        out.weight[:, :hidden, :] *= 0.1
        out.bias.copy_(torch.tensor(base, dtype=torch.float32))
        for c in range(classes):
            out.weight[:, hidden + c, 0] = torch.tensor(logmean[c] - base, dtype=torch.float32)


def classify(classifier, p):
    return classifier(p, None).mean(dim=2)  # time-averaged logits


# ---------------------------------------------------------------------------
# Export

def export(path, nets, classes, latent, freq, metadata):
    manifest = {
        "format": "FMVAE01", "version": 1, "num_classes": classes, "latent_channels": latent,
        "freq_bins": freq, "conditioning": "concat", "input": "power_unit_mean",
        "decoder_output": "log_variance", "encoder_output": "mean_log_variance",
        "classifier_pooling": "mean_logits_softmax", "metadata": metadata,
    }
    tensors, payload = [], []
    for name, net in nets.items():
        manifest[name] = {"in_channels": net.in_channels, "layers": [l.manifest() for l in net.layers]}
        for i, layer in enumerate(net.layers):
            for field, t in layer.tensors():
                a = t.detach().cpu().numpy().astype("<f4")
                tensors.append({"name": f"{name}.{i}.{field}", "shape": list(a.shape), "dtype": "float32"})
                payload.append(a.tobytes())
    manifest["tensors"] = tensors
    body = json.dumps(manifest, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(body)))
        f.write(body)
        for chunk in payload:
            f.write(chunk)


def parity_input(freq, frames, k):
    """Deterministic power map shared with the C++ parity test."""
    f = np.arange(freq)[:, None]
    n = np.arange(frames)[None, :]
    return np.exp(np.sin(0.37 * f + 1.3 * n + k) + 0.5 * np.cos(0.011 * f * (n + 1) + 0.7 * k))


def export_parity(path, nets, classes, latent, freq, frames=6, cases=2):
    enc, dec, cls = nets["encoder"], nets["decoder"], nets["classifier"]
    out = {"frames": frames, "cases": []}
    with torch.no_grad():
        for k in range(cases):
            p = torch.tensor(unit_mean(parity_input(freq, frames, k)), dtype=torch.float32)[None]
            c = torch.full((1, classes), 0.0)
            c[0, k % classes] = 0.7
            c[0, (k + 1) % classes] = 0.3
            post = torch.softmax(classify(cls, p).double(), dim=1)[0]
            h = enc(p, c)
            z = h[:, :latent]
            sigma2 = torch.exp(fit_frames(dec(z, c), frames).double().clamp(-200, 200))[0]
            out["cases"].append({
                "index": k,
                "class_vector": c[0].tolist(),
                "posterior": post.tolist(),
                "latent_mean": z[0].double().tolist(),
                "decoder_variance": sigma2.tolist(),
            })
    Path(path).write_text(json.dumps(out))


# ---------------------------------------------------------------------------
# Training

def spectrograms(waves):
    return [np.abs(stft(x)) ** 2 for x in waves]


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--train", required=True, help="training corpus directory")
    ap.add_argument("--test", required=True, help="held-out corpus directory")
    ap.add_argument("--out", required=True, help="output .fmvae path")
    ap.add_argument("--parity", help="optional parity fixture (JSON) for the C++ runtime")
    ap.add_argument("--latent", type=int, default=16)
    ap.add_argument("--hidden", type=int, default=64)
    ap.add_argument("--steps", type=int, default=1500)
    ap.add_argument("--batch", type=int, default=16)
    ap.add_argument("--lr", type=float, default=1e-3)
    ap.add_argument("--lambda-aux", type=float, default=1.0, help="weight of the class-recovery term on decoder output")
    ap.add_argument("--lambda-cls", type=float, default=1.0, help="weight of the classifier cross-entropy")
    ap.add_argument("--interference-prob", type=float, default=0.5)
    ap.add_argument("--calibration-batches", type=int, default=50)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    torch.manual_seed(args.seed)
    rng = np.random.default_rng(args.seed)
    torch.set_num_threads(1)

    train_w, train_y, meta = load_corpus(args.train)
    test_w, test_y, _ = load_corpus(args.test)
    classes = int(meta["classes"])
    train_spec = [stft(x) for x in train_w]
    freq, frames = train_spec[0].shape
    test_p = [np.abs(stft(x)) ** 2 for x in test_w]

    enc, dec, cls = build(freq, classes, args.latent, args.hidden)
    init_decoder_output(dec, [np.abs(s) ** 2 for s in train_spec], train_y, classes, args.hidden)
    params = list(enc.parameters()) + list(dec.parameters()) + list(cls.parameters())
    opt = torch.optim.Adam(params, lr=args.lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, args.steps)

    def batch():
        idx = rng.integers(0, len(train_spec), args.batch)
        clean, noisy = [], []
        for i in idx:
            s = train_spec[i]
            x = s.copy()
            if rng.random() < args.interference_prob:
                j = rng.integers(0, len(train_spec))
                while train_y[j] == train_y[i]:
                    j = rng.integers(0, len(train_spec))
                level = 10.0 ** (-rng.uniform(10.0, 30.0) / 20.0)
                x = x + level * train_spec[j] * np.exp(2j * np.pi * rng.random(x.shape))
            p_clean, p_noisy = np.abs(s) ** 2, np.abs(x) ** 2
            scale = p_noisy.mean()
            clean.append(p_clean / scale)
            noisy.append(p_noisy / scale)
        to = lambda a: torch.tensor(np.stack(a), dtype=torch.float32)
        labels = torch.tensor(train_y[idx], dtype=torch.long)
        return to(clean), to(noisy), labels

    for step in range(1, args.steps + 1):
        enc.train(); dec.train(); cls.train()
        clean, noisy, labels = batch()
        onehot = F.one_hot(labels, classes).float()
        h = enc(noisy, onehot)
        mu, logvar_z = h[:, :args.latent], h[:, args.latent:].clamp(-30, 30)
        z = mu + torch.randn_like(mu) * torch.exp(0.5 * logvar_z)
        logvar = fit_frames(dec(z, onehot), frames).clamp(-30, 30)
        # Complex-Gaussian negative log-likelihood (IS divergence up to constants).
        recon = (logvar + clean * torch.exp(-logvar)).mean()
        kl = 0.5 * (mu ** 2 + torch.exp(logvar_z) - logvar_z - 1.0).sum(dim=1).mean() / freq
        gen = torch.exp(logvar)
        gen = gen / gen.mean(dim=(1, 2), keepdim=True)
        aux = F.cross_entropy(classify(cls, gen), labels)
        ce = F.cross_entropy(classify(cls, noisy), labels)
        loss = recon + kl + args.lambda_aux * aux + args.lambda_cls * ce
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        if step % 100 == 0 or step == 1:
            print(f"step {step:5d} loss {loss.item():.4f} recon {recon.item():.4f} kl {kl.item():.4f} "
                  f"aux {aux.item():.4f} ce {ce.item():.4f}", flush=True)

    # Running statistics lag the fast-moving early layers; re-estimate them
    # with the final weights, feeding the decoder the encoder mean as at inference.
    bns = [m for net in (enc, dec, cls) for m in net.modules() if isinstance(m, BN)]
    for m in bns:
        m.reset_running_stats()
        m.momentum = None  # cumulative average
    with torch.no_grad():
        for _ in range(args.calibration_batches):
            clean, noisy, labels = batch()
            onehot = F.one_hot(labels, classes).float()
            dec(enc(noisy, onehot)[:, :args.latent], onehot)
            cls(noisy, None)

    enc.eval(); dec.eval(); cls.eval()
    with torch.no_grad():
        correct = 0
        for p, y in zip(test_p, test_y):
            x = torch.tensor(unit_mean(p), dtype=torch.float32)[None]
            correct += int(classify(cls, x).argmax(dim=1).item() == y)
    accuracy = correct / len(test_p)
    print(f"held-out classifier accuracy {accuracy:.4f} ({correct}/{len(test_p)})")

    nets = {"encoder": enc, "decoder": dec, "classifier": cls}
    metadata = {
        "description": "toy ACVAE source model for fastsep tests",
        "train_corpus": {"classes": classes, "utterances": len(train_w), "seed": meta["seed"]},
        "heldout_accuracy": round(accuracy, 4),
        "steps": args.steps, "hidden": args.hidden, "seed": args.seed,
        "stft": {"window": 4096, "shift": 2048, "sample_rate": meta["sample_rate"]},
    }
    export(args.out, nets, classes, args.latent, freq, metadata)
    if args.parity:
        export_parity(args.parity, nets, classes, args.latent, freq)
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
