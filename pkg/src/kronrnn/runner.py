"""Experiment orchestration: task runtimes, the training loop, eval, diag.

A task runtime supplies deterministic batches (independent Philox streams
for train/valid/test), the loss convention, and the validation metric.
The training loop is shared by the update-driven synthetic tasks and the
epoch-driven data tasks.
"""

import os
import time

import numpy as np

from . import tasks
from .artifacts import CurveLogger, write_csv, write_json
from .cells import make_cell
from .checkpoint import load_checkpoint, save_checkpoint
from .config import load_config
from .diagnostics import spectral_report
from .errors import ConfigError, DataError, DivergenceError
from .kron import KroneckerMatrix
from .rng import (STREAM_SHUFFLE, STREAM_TEST, STREAM_TRAIN, STREAM_VALID,
                  generator)
from .training import (BpttResult, bptt_loss_and_grads, clip_gradients,
                       make_optimizer, masked_loss_and_grad, plateau_decay,
                       tree_add_, tree_leaves, zero_recurrent_grads,
                       zeros_like_tree)


def count_scalars(arr):
    return arr.size * (2 if np.iscomplexobj(arr) else 1)


def parameter_summary(cell, params):
    total = 0
    recurrent = 0
    for name, arr in tree_leaves(params):
        base = name.split(".")[0]
        n = count_scalars(arr)
        total += n
        if base in cell.recurrent_param_names:
            recurrent += n
    trainable = 0 if cell.frozen_recurrent else recurrent
    return {"params_total": total, "params_recurrent": recurrent,
            "params_recurrent_trainable": trainable}


# -- task runtimes -----------------------------------------------------------

class _SyntheticTask:
    mode = "stream"
    carryover = False

    def __init__(self, cfg):
        self.t = cfg.sequence_length
        self.batch_size = cfg.schedule.batch_size
        self.seed = cfg.seed
        self.valid_size = cfg.schedule.valid_size
        self.test_size = cfg.schedule.test_size

    def _batches(self, stream, size):
        n_batches = max(1, size // self.batch_size)
        for j in range(n_batches):
            yield self._gen(generator(self.seed, stream, j))

    def valid_batches(self):
        return self._batches(STREAM_VALID, self.valid_size)

    def test_batches(self):
        return self._batches(STREAM_TEST, self.test_size)

    def train_batch(self, i):
        return self._gen(generator(self.seed, STREAM_TRAIN, i))


class CopyTask(_SyntheticTask):
    d, m = 10, 10
    metric_name = "cross_entropy_nats"
    metric_mode = "min"

    def _gen(self, rng):
        return tasks.gen_copy_batch(self.t, self.batch_size, rng=rng)

    def baseline(self):
        return tasks.copy_baseline_nats(self.t)


class AddingTask(_SyntheticTask):
    d, m = 2, 1
    metric_name = "mse"
    metric_mode = "min"

    def _gen(self, rng):
        return tasks.gen_adding_batch(self.t, self.batch_size, rng=rng)

    def baseline(self):
        return tasks.adding_baseline_mse()


class MnistTask:
    mode = "epochs"
    carryover = False
    d, m = 1, 10
    metric_name = "accuracy"
    metric_mode = "max"

    def __init__(self, cfg):
        self.batch_size = cfg.schedule.batch_size
        self.seed = cfg.seed
        images, labels = tasks.load_mnist_idx(cfg.data.train_images,
                                              cfg.data.train_labels)
        self.permutation = None
        if cfg.task == "mnist-permuted":
            pseed = cfg.data.permute_seed
            if pseed is None:
                pseed = cfg.seed
            self.permutation = tasks.pixel_permutation(images.shape[1], pseed)
            images = tasks.permute_pixels(images, self.permutation)
        train_size = cfg.schedule.train_size
        valid_size = cfg.schedule.valid_size
        if train_size + valid_size > images.shape[0]:
            raise DataError(
                f"train+valid sizes {train_size}+{valid_size} exceed the "
                f"{images.shape[0]} available examples")
        self.train_images = images[:train_size]
        self.train_labels = labels[:train_size]
        self.valid_images = images[train_size:train_size + valid_size]
        self.valid_labels = labels[train_size:train_size + valid_size]
        self.test_images = None
        self.test_labels = None
        if cfg.data.test_images and cfg.data.test_labels:
            ti, tl = tasks.load_mnist_idx(cfg.data.test_images,
                                          cfg.data.test_labels)
            if self.permutation is not None:
                ti = tasks.permute_pixels(ti, self.permutation)
            if cfg.schedule.test_size < ti.shape[0]:
                ti = ti[:cfg.schedule.test_size]
                tl = tl[:cfg.schedule.test_size]
            self.test_images = ti
            self.test_labels = tl

    def epoch_batches(self, epoch):
        order = generator(self.seed, STREAM_SHUFFLE, epoch).permutation(
            self.train_images.shape[0])
        bs = self.batch_size
        for start in range(0, len(order) - bs + 1, bs):
            idx = order[start:start + bs]
            yield tasks.image_batch(self.train_images, self.train_labels,
                                    idx), True

    def _eval_batches(self, images, labels):
        bs = self.batch_size
        n = images.shape[0]
        for start in range(0, n, bs):
            idx = np.arange(start, min(start + bs, n))
            yield tasks.image_batch(images, labels, idx)

    def valid_batches(self):
        return self._eval_batches(self.valid_images, self.valid_labels)

    def test_batches(self):
        if self.test_images is None:
            return None
        return self._eval_batches(self.test_images, self.test_labels)


class CharLmTask:
    mode = "epochs"
    carryover = True
    metric_name = "bpc"
    metric_mode = "min"

    def __init__(self, cfg):
        self.batch_size = cfg.schedule.batch_size
        self.window = cfg.schedule.bptt_window or 30
        corpus = tasks.load_char_corpus(cfg.data.train_text,
                                        cfg.data.valid_text,
                                        cfg.data.test_text)
        self.corpus = corpus
        self.d = corpus.vocab_size
        self.m = corpus.vocab_size

    def epoch_batches(self, epoch):
        for x_ids, y_ids, is_start in tasks.window_batches(
                self.corpus.train_ids, self.batch_size, self.window):
            batch = tasks.char_window_batch(x_ids, y_ids, self.corpus.vocab_size)
            yield batch, is_start

    def _stream_batches(self, ids):
        for x_ids, y_ids, is_start in tasks.window_batches(
                ids, self.batch_size, self.window):
            yield tasks.char_window_batch(x_ids, y_ids,
                                          self.corpus.vocab_size), is_start

    def valid_batches(self):
        return self._stream_batches(self.corpus.valid_ids)

    def test_batches(self):
        return self._stream_batches(self.corpus.test_ids)


def build_task(cfg):
    if cfg.task == "copy":
        return CopyTask(cfg)
    if cfg.task == "adding":
        return AddingTask(cfg)
    if cfg.task in ("mnist", "mnist-permuted"):
        return MnistTask(cfg)
    if cfg.task == "charlm":
        return CharLmTask(cfg)
    raise ConfigError(f"unknown task {cfg.task!r}")


def build_cell(cfg, task):
    return make_cell(cfg.model, cfg.n, task.d, task.m,
                     factor_shapes=cfg.resolved_factor_shapes(),
                     activation=cfg.activation,
                     frozen_recurrent=cfg.frozen_recurrent)


# -- evaluation ---------------------------------------------------------------

def evaluate(cell, params, batches, metric_name, carryover=False):
    """Deterministic metric over an iterable of batches.

    ``batches`` yields TaskBatch or (TaskBatch, is_start) when state is
    carried between consecutive windows.
    """
    total_loss = 0.0
    total_count = 0
    correct = 0
    state = None
    for item in batches:
        batch, is_start = item if isinstance(item, tuple) else (item, True)
        if is_start or not carryover:
            state = None
        if cell.has_cell_state:
            h0, c0 = state if state is not None else (None, None)
            cache = cell.forward_sequence(params, batch.inputs, h0, c0)
            state = (cache.final_h, cache.final_c)
        else:
            h0 = state[0] if state is not None else None
            cache = cell.forward_sequence(params, batch.inputs, h0)
            state = (cache.final_h,)
        logits = cell.output_sequence(params, cache)
        loss, _ = masked_loss_and_grad(batch, logits)
        count = int(batch.loss_mask.sum())
        total_loss += loss * count
        total_count += count
        if metric_name == "accuracy":
            rows, cols = np.nonzero(batch.loss_mask)
            pred = logits[rows, cols].argmax(axis=1)
            correct += int((pred == batch.targets[rows, cols]).sum())
    mean_loss = total_loss / max(total_count, 1)
    if metric_name == "accuracy":
        return correct / max(total_count, 1), mean_loss
    if metric_name == "bpc":
        return float(tasks.bits_per_char(mean_loss)), mean_loss
    return mean_loss, mean_loss


def _windowed_update(cell, params, batch, window, amplitude, override):
    """Truncated BPTT inside one long batch: forward windows carry state,
    gradients stop at window boundaries; window losses/grads are combined
    so the result matches full-sequence mask-average weighting."""
    t = batch.seq_len
    counts = []
    pieces = []
    state = None
    penalty = 0.0
    for start in range(0, t, window):
        end = min(start + window, t)
        sub = tasks.TaskBatch(
            inputs=batch.inputs[:, start:end],
            targets=(batch.targets[:, start:end]
                     if batch.targets.ndim == 2 else batch.targets),
            loss_mask=batch.loss_mask[:, start:end],
            loss_kind=batch.loss_kind)
        h0 = c0 = None
        if state is not None:
            h0 = state[0]
            c0 = state[1] if cell.has_cell_state else None
        res = bptt_loss_and_grads(cell, params, sub,
                                  unitary_amplitude=0.0, h0=h0, c0=c0)
        state = res.final_state
        count = int(sub.loss_mask.sum())
        counts.append(count)
        pieces.append(res)
    total_count = sum(counts)
    grads = zeros_like_tree(params)
    task_loss = 0.0
    for res, count in zip(pieces, counts):
        if count == 0:
            continue
        weight = count / total_count
        tree_add_(grads, res.grads, scale=weight)
        task_loss += res.task_loss * weight
    if amplitude > 0.0 and (cell.penalty_allowed or override):
        penalty, pgrads = cell.recurrent_penalty(params, amplitude)
        tree_add_(grads, pgrads)
    return BpttResult(loss=task_loss + penalty, task_loss=task_loss,
                      penalty=penalty, grads=grads, logits=None,
                      final_state=state, gradient_trace=None)


# -- training ------------------------------------------------------------------

def recurrent_operator_reports(cell, params, iters=500):
    reports = {}
    for name in cell.recurrent_param_names:
        w = params[name]
        op = KroneckerMatrix(w) if isinstance(w, list) else w
        reports[name] = spectral_report(op, iters=iters).to_dict()
    return reports


def run_training(cfg, out_dir=None, resume=None):
    """Train per config; writes curve CSV, checkpoints, and summary JSON
    under ``out_dir`` (artifact writes are skipped when it is None)."""
    start_time = time.perf_counter()
    task = build_task(cfg)
    cell = build_cell(cfg, task)
    params = cell.init_params(cfg.seed)
    sched = cfg.schedule

    step0 = 0
    metric_history = []
    if resume is not None:
        params, manifest = load_checkpoint(resume,
                                           expected_hash=cfg.model_hash())
        step0 = manifest["step"]
        metric_history = list(manifest["metric_history"])

    opt = make_optimizer(params, cfg.optimizer.kind,
                         cfg.optimizer.learning_rate, cfg.optimizer.decay,
                         cfg.optimizer.beta1, cfg.optimizer.beta2,
                         cfg.optimizer.epsilon)

    curve = CurveLogger(os.path.join(out_dir, "curve.csv") if out_dir else None)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        meta = {"config": cfg.to_dict(), "model_hash": cfg.model_hash()}
        meta.update(parameter_summary(cell, params))
        if getattr(task, "permutation", None) is not None:
            meta["pixel_permutation"] = [int(i) for i in task.permutation]
        write_json(os.path.join(out_dir, "run_meta.json"), meta)

    better = (lambda a, b: a < b) if task.metric_mode == "min" else (lambda a, b: a > b)
    best_metric = None
    best_step = None
    lr = cfg.optimizer.learning_rate
    step = step0
    stop = False
    # Plateau decay compares only the evals taken after its warmup gate,
    # so a lucky dip during the exploration phase cannot freeze the rule.
    plateau_history = []

    def maybe_plateau_decay(metric):
        nonlocal lr
        if not sched.plateau or step < sched.plateau_start_updates:
            return
        signed = metric if task.metric_mode == "min" else -metric
        plateau_history.append(float(signed))
        lr = plateau_decay(plateau_history, lr, sched.lr_decay_factor)

    def one_update(batch, state):
        nonlocal step
        if sched.bptt_window and task.mode != "epochs" and \
                batch.seq_len > sched.bptt_window:
            res = _windowed_update(cell, params, batch, sched.bptt_window,
                                   sched.unitary_amplitude,
                                   sched.penalty_override)
        else:
            h0 = c0 = None
            if state is not None:
                h0 = state[0]
                c0 = state[1] if cell.has_cell_state else None
            res = bptt_loss_and_grads(
                cell, params, batch,
                unitary_amplitude=sched.unitary_amplitude, h0=h0, c0=c0,
                penalty_override=sched.penalty_override)
        grads = res.grads
        if cell.frozen_recurrent:
            zero_recurrent_grads(cell, grads)
        if sched.gradient_clip is not None:
            grads = clip_gradients(grads, sched.gradient_clip)
        opt.learning_rate = lr
        opt.step(params, grads)
        step += 1
        return res

    def run_validation():
        nonlocal best_metric, best_step, stop
        metric, _ = evaluate(cell, params, task.valid_batches(),
                             task.metric_name, task.carryover)
        metric_history.append(float(metric))
        if best_metric is None or better(metric, best_metric):
            best_metric = float(metric)
            best_step = step
            if out_dir:
                # test-set evaluation selects the best-validation model
                save_checkpoint(os.path.join(out_dir, "checkpoint_best"),
                                params, cfg.model_hash(), step=step,
                                metric_history=metric_history,
                                rng_state=_rng_state(cfg, step),
                                extra={"config": cfg.to_dict()})
        if sched.target_metric is not None and better(metric,
                                                      sched.target_metric):
            stop = True
        return metric

    def maybe_checkpoint():
        if out_dir and sched.checkpoint_every and \
                step % sched.checkpoint_every == 0:
            save_checkpoint(os.path.join(out_dir, "checkpoints",
                                         f"step_{step:08d}"),
                            params, cfg.model_hash(), step=step,
                            metric_history=metric_history,
                            rng_state=_rng_state(cfg, step),
                            extra={"config": cfg.to_dict()})

    last_metric = None
    try:
        if task.mode == "stream":
            budget = sched.max_updates
            if budget is None:
                raise ConfigError("stream tasks require schedule.max_updates")
            for i in range(step0, budget):
                res = one_update(task.train_batch(i), None)
                if step % sched.eval_every == 0 or step == budget:
                    last_metric = run_validation()
                    maybe_plateau_decay(last_metric)
                if step % sched.log_every == 0 or step == budget:
                    curve.log(step, res.task_loss, last_metric, lr,
                              res.penalty, time.perf_counter() - start_time)
                maybe_checkpoint()
                if stop:
                    break
        else:
            epochs = sched.epochs
            if epochs is None:
                raise ConfigError("epoch tasks require schedule.epochs")
            for epoch in range(epochs):
                state = None
                res = None
                for batch, is_start in task.epoch_batches(epoch):
                    if is_start or not task.carryover:
                        state = None
                    res = one_update(batch, state)
                    state = res.final_state if task.carryover else None
                    if sched.max_updates and step - step0 >= sched.max_updates:
                        stop = True
                    if step % sched.log_every == 0:
                        curve.log(step, res.task_loss, last_metric, lr,
                                  res.penalty,
                                  time.perf_counter() - start_time)
                    maybe_checkpoint()
                    if stop:
                        break
                if res is None:
                    raise DataError("epoch produced no batches; "
                                    "check sizes vs batch_size")
                last_metric = run_validation()
                curve.log(step, res.task_loss, last_metric, lr, res.penalty,
                          time.perf_counter() - start_time)
                maybe_plateau_decay(last_metric)
                if stop:
                    break
    except DivergenceError as exc:
        if out_dir:
            write_json(os.path.join(out_dir, "divergence.json"),
                       {"step": step, "diagnostics": exc.diagnostics,
                        "grad_norms": None})
        raise

    if last_metric is None:
        last_metric = run_validation()

    summary = {"metric_name": task.metric_name, "updates": step,
               "best_valid_metric": best_metric, "best_valid_step": best_step,
               "final_valid_metric": float(last_metric),
               "wallclock_s": time.perf_counter() - start_time,
               "diverged": False}
    summary.update(parameter_summary(cell, params))

    test_batches = task.test_batches()
    if test_batches is not None:
        test_metric, test_loss = evaluate(cell, params, test_batches,
                                          task.metric_name, task.carryover)
        summary["final_test_metric"] = float(test_metric)
        summary["final_test_loss_nats"] = float(test_loss)

    reports = recurrent_operator_reports(cell, params)
    summary["recurrent_spectral"] = reports
    first = reports[cell.recurrent_param_names[0]]
    summary["final_unitarity_residual"] = first["unitarity_residual"]
    summary["final_spectral_norm"] = first["spectral_norm"]

    if out_dir:
        save_checkpoint(os.path.join(out_dir, "checkpoint"), params,
                        cfg.model_hash(), step=step,
                        metric_history=metric_history,
                        rng_state=_rng_state(cfg, step),
                        extra={"config": cfg.to_dict()})
        write_json(os.path.join(out_dir, "summary.json"), summary)
        curve.flush()
    summary["_params"] = params   # in-process callers (eval/tests) reuse these
    return summary


def _rng_state(cfg, step):
    """Counter-based streams make the restartable state just (seed, step)."""
    return {"generator": "philox-4x64", "master_seed": cfg.seed,
            "updates_done": step}


def run_eval(ckpt_dir, cfg):
    params, manifest = load_checkpoint(ckpt_dir,
                                       expected_hash=cfg.model_hash())
    task = build_task(cfg)
    cell = build_cell(cfg, task)
    template = {name for name, _ in tree_leaves(cell.init_params(cfg.seed))}
    loaded = {name for name, _ in tree_leaves(params)}
    if template != loaded:
        raise ConfigError(
            f"checkpoint parameters {sorted(loaded)} do not match the "
            f"model's {sorted(template)}")
    metrics = {"metric_name": task.metric_name, "step": manifest["step"]}
    valid_metric, valid_loss = evaluate(cell, params, task.valid_batches(),
                                        task.metric_name, task.carryover)
    metrics["valid_metric"] = float(valid_metric)
    metrics["valid_loss_nats"] = float(valid_loss)
    test_batches = task.test_batches()
    if test_batches is not None:
        test_metric, test_loss = evaluate(cell, params, test_batches,
                                          task.metric_name, task.carryover)
        metrics["test_metric"] = float(test_metric)
        metrics["test_loss_nats"] = float(test_loss)
    return metrics


def run_diag(source, sweep=None, out_dir=None, iters=200, seed=None):
    """Spectral report for a checkpoint or a freshly initialized config;
    optional amplitude sweep when given a config."""
    from .diagnostics import amplitude_sweep

    if os.path.isdir(source):
        params, manifest = load_checkpoint(source)
        extra = manifest.get("extra", {})
        if "config" not in extra:
            raise ConfigError("checkpoint lacks an embedded config")
        from .config import config_from_dict
        cfg = config_from_dict(_strip_nones(extra["config"]))
        if seed is not None:
            cfg.seed = seed
        task = build_task(cfg)
        cell = build_cell(cfg, task)
    else:
        cfg = load_config(source)
        if seed is not None:
            cfg.seed = seed
        task = build_task(cfg)
        cell = build_cell(cfg, task)
        params = cell.init_params(cfg.seed)

    report = {"model_hash": cfg.model_hash(),
              "operators": recurrent_operator_reports(cell, params,
                                                      iters=iters)}
    first = report["operators"][cell.recurrent_param_names[0]]
    report.update(first)

    if cfg.task in ("copy", "adding"):
        # per-timestep ||dL/dh_t|| on one deterministic validation batch
        from .diagnostics import gradient_flow_trace
        batch = next(iter(task.valid_batches()))
        trace = gradient_flow_trace(cell, params, batch,
                                    unitary_amplitude=0.0)
        report["gradient_trace"] = {str(t): float(v)
                                    for t, v in enumerate(trace)}
    if out_dir:
        write_json(os.path.join(out_dir, "spectral_report.json"), report)
        if "gradient_trace" in report:
            write_json(os.path.join(out_dir, "gradient_trace.json"),
                       report["gradient_trace"])

    if sweep:
        rows = amplitude_sweep(cfg, sweep,
                               out_root=os.path.join(out_dir, "sweep")
                               if out_dir else None)
        report["sweep"] = rows
        if out_dir:
            write_csv(os.path.join(out_dir, "sweep.csv"),
                      ("lambda", "residual", "spectral_norm", "valid_metric"),
                      rows)
    return report


def _strip_nones(d):
    """Inverse of dataclasses.asdict defaults: drop keys whose value is None
    so config re-validation applies its own defaulting."""
    if isinstance(d, dict):
        return {k: _strip_nones(v) for k, v in d.items() if v is not None}
    return d
