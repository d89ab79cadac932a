"""Model architectures producing per-step option logits (or correctness
logits).

Every model consumes a SequenceBatch and returns one flat logits tensor over
all (student, step) cells plus the row order used ("tb": step-major, "bt":
student-major), so the loss and the metrics never care which architecture
produced them.

Alignment convention for recurrent state: the state used to predict step t
has consumed inputs 1..t-1 (forward direction) and t+1..T (backward
direction). The chosen-option and correctness embeddings inside the step
input are multiplied by the step's mask, so hidden labels never reach any
prediction, and a step's own label never reaches its own prediction.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .data import NUM_OPTIONS, StudentSequence
from .errors import ConfigError, DataError
from .layers import (EmbeddingTables, FeedForwardNet, GcnParams, LstmCell,
                     gcn_embed, init_matrix, subject_multihot)
from .seeding import substream

NEG_INF = -1e30


@dataclass(frozen=True)
class ModelConfig:
    num_questions: int
    num_subjects: int
    num_students: int
    d: int = 16
    hidden: int = 32
    memory_slots: int = 16
    attention_heads: int = 1
    max_len: int = 200
    num_options: int = NUM_OPTIONS


def config_for_dataset(ds, **overrides) -> ModelConfig:
    return ModelConfig(num_questions=ds.num_questions, num_subjects=ds.num_subjects,
                       num_students=ds.num_students, **overrides)


# ---------------------------------------------------------------------------
# batches
# ---------------------------------------------------------------------------

@dataclass
class SequenceBatch:
    """Padded arrays over a list of sequences; pad rows carry zeros and are
    excluded from the loss through the pad indicator."""
    student_ids: np.ndarray   # (B,)
    questions: np.ndarray     # (B, T) int
    subjects_hot: np.ndarray  # (B, T, S)
    chosen: np.ndarray        # (B, T) int in [0, 4)
    correct: np.ndarray       # (B, T) int
    correctness: np.ndarray   # (B, T) int in {0, 1}
    label_mask: np.ndarray    # (B, T) 1 = labels observed as input
    pad: np.ndarray           # (B, T) 1 = real step

    @property
    def size(self):
        return self.questions.shape


def make_batch(sequences, config: ModelConfig) -> SequenceBatch:
    B = len(sequences)
    T = max(len(seq.events) for seq in sequences)
    S = config.num_subjects
    batch = SequenceBatch(
        student_ids=np.zeros(B, dtype=np.int64),
        questions=np.zeros((B, T), dtype=np.int64),
        subjects_hot=np.zeros((B, T, S)),
        chosen=np.zeros((B, T), dtype=np.int64),
        correct=np.zeros((B, T), dtype=np.int64),
        correctness=np.zeros((B, T), dtype=np.int64),
        label_mask=np.zeros((B, T)),
        pad=np.zeros((B, T)),
    )
    for b, seq in enumerate(sequences):
        if seq.student_id >= config.num_students:
            raise DataError(f"unknown student id {seq.student_id}")
        batch.student_ids[b] = seq.student_id
        for t, ev in enumerate(seq.events):
            if ev.question_id >= config.num_questions:
                raise DataError(f"unknown question id {ev.question_id}")
            if max(ev.subject_ids) >= config.num_subjects:
                raise DataError(f"unknown subject id in {ev.subject_ids}")
            batch.questions[b, t] = ev.question_id
            for s in ev.subject_ids:
                batch.subjects_hot[b, t, s] = 1.0
            batch.chosen[b, t] = ev.chosen_option
            batch.correct[b, t] = ev.correct_option
            batch.correctness[b, t] = ev.correctness
            batch.label_mask[b, t] = ev.mask
            batch.pad[b, t] = 1.0
    return batch


def flatten_cells(arr: np.ndarray, order: str) -> np.ndarray:
    """Flatten a (B, T) array to match a model's flat logits row order."""
    if order == "tb":
        return np.ascontiguousarray(arr.T).reshape(-1)
    if order == "bt":
        return np.ascontiguousarray(arr).reshape(-1)
    raise ConfigError(f"unknown cell order {order!r}")


def _tile(col: np.ndarray, width: int) -> ad.Tensor:
    return ad.constant(np.repeat(col[:, None], width, axis=1))


# ---------------------------------------------------------------------------
# model base
# ---------------------------------------------------------------------------

class BaseModel:
    kind = "base"

    def __init__(self, config: ModelConfig, task: str, rng):
        if task not in ("option", "correctness"):
            raise ConfigError(f"task must be 'option' or 'correctness', got {task!r}")
        self.config = config
        self.task = task
        self.out_width = 4 if task == "option" else 1

    def named_parameters(self) -> dict:
        raise NotImplementedError

    def forward_batch(self, batch: SequenceBatch):
        """Returns (flat logits Tensor of shape (B*T, out), row order)."""
        raise NotImplementedError

    # -- shared pieces -----------------------------------------------------

    def _step_features(self, batch, t, q_table, s_table):
        q = ad.gather_rows(q_table, batch.questions[:, t])
        subj = ad.matmul(ad.constant(batch.subjects_hot[:, t]), s_table)
        corr = ad.gather_rows(self.tables.option, batch.correct[:, t])
        return q, subj, corr

    def _step_input(self, batch, t, q, subj, corr):
        """[question + correct option + subjects + masked chosen + masked response]."""
        d = self.config.d
        m = _tile(batch.label_mask[:, t], d)
        chosen = ad.multiply(ad.gather_rows(self.tables.option, batch.chosen[:, t]), m)
        resp = ad.multiply(ad.gather_rows(self.tables.response, batch.correctness[:, t]), m)
        return ad.concat([q, corr, subj, chosen, resp])

    def _student_features(self, batch, b, q_table, s_table):
        q = ad.gather_rows(q_table, batch.questions[b])
        subj = ad.matmul(ad.constant(batch.subjects_hot[b]), s_table)
        corr = ad.gather_rows(self.tables.option, batch.correct[b])
        return q, subj, corr

    def _student_input(self, batch, b, q, subj, corr):
        d = self.config.d
        m = _tile(batch.label_mask[b], d)
        chosen = ad.multiply(ad.gather_rows(self.tables.option, batch.chosen[b]), m)
        resp = ad.multiply(ad.gather_rows(self.tables.response, batch.correctness[b]), m)
        return ad.concat([q, corr, subj, chosen, resp])


def _gate_carry(new, old, pad_col, width):
    """Carry state through pad steps unchanged."""
    if pad_col.all():
        return new
    keep = _tile(pad_col, width)
    drop = _tile(1.0 - pad_col, width)
    return ad.add(ad.multiply(new, keep), ad.multiply(old, drop))


def _scan_lstm(cell, inputs, pads, B):
    """States aligned so states[t] has consumed inputs[0..t-1]."""
    h = ad.constant(np.zeros((B, cell.hidden)))
    c = ad.constant(np.zeros((B, cell.hidden)))
    states = []
    for t, x in enumerate(inputs):
        states.append(h)
        h_new, c_new = cell.step(h, c, x)
        h = _gate_carry(h_new, h, pads[t], cell.hidden)
        c = _gate_carry(c_new, c, pads[t], cell.hidden)
    return states


# ---------------------------------------------------------------------------
# NCF
# ---------------------------------------------------------------------------

class NcfModel(BaseModel):
    """Static student embedding, no temporal state."""
    kind = "ncf"

    def __init__(self, config, task, rng):
        super().__init__(config, task, rng)
        self.tables = EmbeddingTables.create(rng, config.num_questions, config.num_subjects,
                                             config.d, num_students=config.num_students)
        self.head = FeedForwardNet(rng, [3 * config.d, config.hidden, self.out_width])

    def named_parameters(self):
        out = {}
        self.tables.named(out)
        self.head.named(out, "head")
        return out

    def forward_batch(self, batch):
        B, T = batch.size
        q = ad.gather_rows(self.tables.question, batch.questions.reshape(-1))
        user = ad.gather_rows(self.tables.user, np.repeat(batch.student_ids, T))
        subj = ad.matmul(ad.constant(batch.subjects_hot.reshape(B * T, -1)), self.tables.subject)
        return self.head(ad.concat([q, user, subj])), "bt"


# ---------------------------------------------------------------------------
# bidirectional recurrent models (CF setup)
# ---------------------------------------------------------------------------

class PoBiDktModel(BaseModel):
    """Bi-directional LSTM over partially observed sequences."""
    kind = "pobidkt"

    def __init__(self, config, task, rng):
        super().__init__(config, task, rng)
        d, h = config.d, config.hidden
        self.tables = EmbeddingTables.create(rng, config.num_questions, config.num_subjects, d)
        self.fwd = LstmCell(rng, 5 * d, h)
        self.bwd = LstmCell(rng, 5 * d, h)
        self.head = FeedForwardNet(rng, [2 * h + 3 * d, 2 * h, self.out_width])

    def named_parameters(self):
        out = {}
        self.tables.named(out)
        self.fwd.named(out, "lstm_fwd")
        self.bwd.named(out, "lstm_bwd")
        self.head.named(out, "head")
        return out

    def _embedding_tables(self, batch):
        return self.tables.question, self.tables.subject

    def forward_batch(self, batch):
        B, T = batch.size
        q_table, s_table = self._embedding_tables(batch)
        feats = [self._step_features(batch, t, q_table, s_table) for t in range(T)]
        inputs = [self._step_input(batch, t, *feats[t]) for t in range(T)]
        pads = [batch.pad[:, t] for t in range(T)]
        fwd_states = _scan_lstm(self.fwd, inputs, pads, B)
        bwd_rev = _scan_lstm(self.bwd, inputs[::-1], pads[::-1], B)
        bwd_states = bwd_rev[::-1]
        logits = [self.head(ad.concat([fwd_states[t], bwd_states[t], *feats[t]]))
                  for t in range(T)]
        return ad.concat(logits, axis=0), "tb"


class BiGiktModel(PoBiDktModel):
    """PO-BiDKT with question/subject rows replaced by graph-propagated ones."""
    kind = "bigikt"

    def __init__(self, config, task, rng, question_subjects=None):
        super().__init__(config, task, rng)
        if question_subjects is None:
            raise ConfigError("bigikt requires the question-subject graph")
        self.gcn = GcnParams(rng, config.d)
        self.question_subjects = dict(question_subjects)

    def named_parameters(self):
        out = super().named_parameters()
        self.gcn.named(out)
        return out

    def _embedding_tables(self, batch):
        s1, q2 = gcn_embed(self.gcn, self.tables, self.question_subjects,
                           self.config.num_questions, self.config.num_subjects)
        return q2, s1


# ---------------------------------------------------------------------------
# causal models (KT setup)
# ---------------------------------------------------------------------------

class DktModel(BaseModel):
    """Forward LSTM; the state predicting step t saw steps 1..t-1 only."""
    kind = "dkt"

    def __init__(self, config, task, rng):
        super().__init__(config, task, rng)
        d, h = config.d, config.hidden
        self.tables = EmbeddingTables.create(rng, config.num_questions, config.num_subjects, d)
        self.cell = LstmCell(rng, 5 * d, h)
        self.head = FeedForwardNet(rng, [h + 3 * d, h, self.out_width])

    def named_parameters(self):
        out = {}
        self.tables.named(out)
        self.cell.named(out, "lstm")
        self.head.named(out, "head")
        return out

    def forward_batch(self, batch):
        B, T = batch.size
        feats = [self._step_features(batch, t, self.tables.question, self.tables.subject)
                 for t in range(T)]
        inputs = [self._step_input(batch, t, *feats[t]) for t in range(T)]
        pads = [batch.pad[:, t] for t in range(T)]
        states = _scan_lstm(self.cell, inputs, pads, B)
        logits = [self.head(ad.concat([states[t], *feats[t]])) for t in range(T)]
        return ad.concat(logits, axis=0), "tb"


class DkvmnModel(BaseModel):
    """Key-value memory: attention read over slots, erase-then-add write."""
    kind = "dkvmn"

    def __init__(self, config, task, rng):
        super().__init__(config, task, rng)
        d, h, m = config.d, config.hidden, config.memory_slots
        self.tables = EmbeddingTables.create(rng, config.num_questions, config.num_subjects, d)
        self.keys = init_matrix(rng, h, m)          # query dim x slots
        self.value_init = init_matrix(rng, m, h)    # slots x value dim
        self.w_query = init_matrix(rng, 3 * d, h)
        self.w_erase = init_matrix(rng, 5 * d, h)
        self.b_erase = ad.parameter(np.zeros(h))
        self.w_add = init_matrix(rng, 5 * d, h)
        self.b_add = ad.parameter(np.zeros(h))
        self.head = FeedForwardNet(rng, [h + 3 * d, h, self.out_width])

    def named_parameters(self):
        out = {}
        self.tables.named(out)
        out["memory.keys"] = self.keys
        out["memory.value_init"] = self.value_init
        out["memory.w_query"] = self.w_query
        out["memory.w_erase"] = self.w_erase
        out["memory.b_erase"] = self.b_erase
        out["memory.w_add"] = self.w_add
        out["memory.b_add"] = self.b_add
        self.head.named(out, "head")
        return out

    def forward_batch(self, batch):
        B, T = batch.size
        m, h = self.config.memory_slots, self.config.hidden
        ones_mem = ad.constant(np.ones((m, h)))
        per_student = []
        for b in range(B):
            q, subj, corr = self._student_features(batch, b, self.tables.question,
                                                   self.tables.subject)
            x = self._student_input(batch, b, q, subj, corr)
            query = ad.matmul(ad.concat([q, corr, subj]), self.w_query)      # (T, h)
            erase = ad.sigmoid(ad.linear(x, self.w_erase, self.b_erase))     # (T, h)
            write = ad.tanh(ad.linear(x, self.w_add, self.b_add))            # (T, h)
            values = self.value_init
            reads = []
            for t in range(T):
                if not batch.pad[b, t]:
                    reads.append(ad.constant(np.zeros((1, h))))
                    continue
                q_row = ad.take_slice(query, (slice(t, t + 1), slice(None)))
                w = ad.softmax(ad.matmul(q_row, self.keys))                  # (1, m)
                reads.append(ad.matmul(w, values))                           # read before write
                w_col = ad.transpose(w)                                      # (m, 1)
                erase_gate = ad.add(ad.scale(ad.matmul(w_col, ad.take_slice(
                    erase, (slice(t, t + 1), slice(None)))), -1.0), ones_mem)
                values = ad.add(ad.multiply(values, erase_gate),
                                ad.matmul(w_col, ad.take_slice(
                                    write, (slice(t, t + 1), slice(None)))))
            read_seq = ad.concat(reads, axis=0)                              # (T, h)
            per_student.append(self.head(ad.concat([read_seq, q, corr, subj])))
        return ad.concat(per_student, axis=0), "bt"


class AktModel(BaseModel):
    """Attention over past steps with multiplicative distance decay."""
    kind = "akt"

    def __init__(self, config, task, rng):
        super().__init__(config, task, rng)
        d, h, heads = config.d, config.hidden, config.attention_heads
        if h % heads:
            raise ConfigError(f"hidden {h} must divide into {heads} attention heads")
        self.tables = EmbeddingTables.create(rng, config.num_questions, config.num_subjects, d)
        self.w_query = init_matrix(rng, 3 * d, h)
        self.w_key = init_matrix(rng, 3 * d, h)
        self.w_value = init_matrix(rng, 4 * d, h)
        # decay rate per head is exp(log_decay) so it stays positive
        self.log_decay = ad.parameter(np.full((heads, 1), -1.0))
        self.summarize = FeedForwardNet(rng, [h, h, h])   # g
        self.head = FeedForwardNet(rng, [h + 3 * d, h, self.out_width])

    def named_parameters(self):
        out = {}
        self.tables.named(out)
        out["attn.w_query"] = self.w_query
        out["attn.w_key"] = self.w_key
        out["attn.w_value"] = self.w_value
        out["attn.log_decay"] = self.log_decay
        self.summarize.named(out, "attn.summarize")
        self.head.named(out, "head")
        return out

    def attention_weights(self, batch, b):
        """Normalized attention over strictly-past steps for one student,
        as a (heads, T, T) array. Useful for inspection and tests."""
        _, alphas = self._student_attention(batch, b)
        return np.stack([a.values for a in alphas])

    def _student_attention(self, batch, b):
        T = batch.size[1]
        heads = self.config.attention_heads
        h = self.config.hidden
        dk = h // heads
        q, subj, corr = self._student_features(batch, b, self.tables.question,
                                               self.tables.subject)
        d_ = self.config.d
        m = _tile(batch.label_mask[b], d_)
        chosen = ad.multiply(ad.gather_rows(self.tables.option, batch.chosen[b]), m)
        resp = ad.multiply(ad.gather_rows(self.tables.response, batch.correctness[b]), m)
        n = ad.concat([q, subj, corr])
        value_in = ad.concat([resp, q, chosen, corr])
        queries = ad.matmul(n, self.w_query)
        keys = ad.matmul(n, self.w_key)
        values = ad.matmul(value_in, self.w_value)

        # score mask: allow only strictly-past, non-pad key steps
        future = np.triu(np.ones((T, T)))                      # tau >= t
        pad_cols = np.repeat((batch.pad[b] == 0)[None, :], T, axis=0)
        blocked = np.clip(future + pad_cols, 0, 1)
        has_past = (blocked == 0).any(axis=1).astype(float)    # rows with any valid key
        distance = ad.constant(np.maximum(np.subtract.outer(np.arange(T), np.arange(T)), 0.0))
        ones_col = ad.constant(np.ones((T, 1)))
        ones_row = ad.constant(np.ones((1, T)))

        outs, alphas = [], []
        for head in range(heads):
            cols = slice(head * dk, (head + 1) * dk)
            qh = ad.take_slice(queries, (slice(None), cols))
            kh = ad.take_slice(keys, (slice(None), cols))
            vh = ad.take_slice(values, (slice(None), cols))
            scores = ad.scale(ad.matmul(qh, ad.transpose(kh)), 1.0 / np.sqrt(dk))
            theta = ad.exp(ad.take_slice(self.log_decay, (slice(head, head + 1), slice(0, 1))))
            decay = ad.multiply(ad.matmul(ad.matmul(ones_col, theta), ones_row), distance)
            scores = ad.add(scores, ad.scale(decay, -1.0))
            scores = ad.masked_fill(scores, blocked, NEG_INF)
            alpha = ad.multiply(ad.softmax(scores), _tile(has_past, T))
            alphas.append(alpha)
            outs.append(ad.matmul(alpha, vh))
        context = outs[0] if heads == 1 else ad.concat(outs)
        state = self.summarize(context)                        # h_t = g(weighted values)
        return (q, subj, corr, state), alphas

    def forward_batch(self, batch):
        B = batch.size[0]
        per_student = []
        for b in range(B):
            (q, subj, corr, state), _ = self._student_attention(batch, b)
            per_student.append(self.head(ad.concat([state, q, corr, subj])))
        return ad.concat(per_student, axis=0), "bt"


# ---------------------------------------------------------------------------
# question-option pair-embedding variant (clustering backbone)
# ---------------------------------------------------------------------------

class PairEmbeddingModel(BaseModel):
    """PO-BiDKT backbone scoring options against learned (question, option)
    pair rows; the rows are the input to shared-error clustering."""
    kind = "pair"

    def __init__(self, config, task, rng):
        if task != "option":
            raise ConfigError("pair-embedding model only supports the option task")
        super().__init__(config, task, rng)
        d, h = config.d, config.hidden
        self.tables = EmbeddingTables.create(rng, config.num_questions, config.num_subjects, d)
        self.fwd = LstmCell(rng, 5 * d, h)
        self.bwd = LstmCell(rng, 5 * d, h)
        self.project = FeedForwardNet(rng, [2 * h, 2 * h, d])
        self.pair_table = init_matrix(rng, config.num_questions * NUM_OPTIONS, d)

    def named_parameters(self):
        out = {}
        self.tables.named(out)
        self.fwd.named(out, "lstm_fwd")
        self.bwd.named(out, "lstm_bwd")
        self.project.named(out, "project")
        out["pair_table"] = self.pair_table
        return out

    # The base recurrence embeds options by letter, but a letter says nothing
    # about which wrong idea it encodes on this question. Routing the chosen
    # and correct options through the pair table instead means two errors that
    # share a misconception feed the state the same direction, and the scoring
    # side reads that direction back out. One table serves both ends.
    def _step_features(self, batch, t, q_table, s_table):
        q = ad.gather_rows(q_table, batch.questions[:, t])
        subj = ad.matmul(ad.constant(batch.subjects_hot[:, t]), s_table)
        corr = ad.gather_rows(self.pair_table,
                              batch.questions[:, t] * NUM_OPTIONS + batch.correct[:, t])
        return q, subj, corr

    def _step_input(self, batch, t, q, subj, corr):
        d = self.config.d
        m = _tile(batch.label_mask[:, t], d)
        idx = batch.questions[:, t] * NUM_OPTIONS + batch.chosen[:, t]
        chosen = ad.multiply(ad.gather_rows(self.pair_table, idx), m)
        resp = ad.multiply(ad.gather_rows(self.tables.response, batch.correctness[:, t]), m)
        return ad.concat([q, corr, subj, chosen, resp])

    def forward_batch(self, batch):
        B, T = batch.size
        feats = [self._step_features(batch, t, self.tables.question, self.tables.subject)
                 for t in range(T)]
        inputs = [self._step_input(batch, t, *feats[t]) for t in range(T)]
        pads = [batch.pad[:, t] for t in range(T)]
        fwd_states = _scan_lstm(self.fwd, inputs, pads, B)
        bwd_states = _scan_lstm(self.bwd, inputs[::-1], pads[::-1], B)[::-1]
        logits = []
        for t in range(T):
            fh = self.project(ad.concat([fwd_states[t], bwd_states[t]]))
            scores = []
            for o in range(NUM_OPTIONS):
                rows = ad.gather_rows(self.pair_table, batch.questions[:, t] * NUM_OPTIONS + o)
                scores.append(ad.row_sum(ad.multiply(fh, rows)))
            logits.append(ad.concat(scores))
        return ad.concat(logits, axis=0), "tb"


# ---------------------------------------------------------------------------
# registry, checkpoints, functional surface
# ---------------------------------------------------------------------------

MODEL_KINDS = {m.kind: m for m in
               (NcfModel, PoBiDktModel, BiGiktModel, DktModel, DkvmnModel,
                AktModel, PairEmbeddingModel)}


def build_model(kind: str, task: str, config: ModelConfig, seed: int,
                question_subjects=None) -> BaseModel:
    if kind not in MODEL_KINDS:
        raise ConfigError(f"unknown model kind {kind!r}; choose from {sorted(MODEL_KINDS)}")
    rng = substream(seed, f"init/{kind}")
    if kind == "bigikt":
        return BiGiktModel(config, task, rng, question_subjects=question_subjects)
    return MODEL_KINDS[kind](config, task, rng)


CHECKPOINT_FORMAT = "option-tracing-checkpoint"


def save_checkpoint(model: BaseModel, path, extra: dict | None = None):
    """One JSON header line, then the parameter arrays concatenated as raw
    little-endian float64 in the order the header lists them."""
    params = model.named_parameters()
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": 1,
        "kind": model.kind,
        "task": model.task,
        "config": asdict(model.config),
        "params": [[name, list(t.values.shape)] for name, t in params.items()],
        "payload": "raw little-endian float64, C order, arrays back to back in `params` order",
    }
    if model.kind == "bigikt":
        header["question_subjects"] = {str(q): list(s)
                                       for q, s in model.question_subjects.items()}
    if extra:
        header["extra"] = extra
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for _, t in params.items():
            fh.write(np.ascontiguousarray(t.values, dtype="<f8").tobytes())


def load_checkpoint(path) -> BaseModel:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("utf-8"))
        payload = fh.read()
    if header.get("format") != CHECKPOINT_FORMAT:
        raise DataError(f"{path}: not a checkpoint file")
    config = ModelConfig(**header["config"])
    graph = None
    if header["kind"] == "bigikt":
        graph = {int(q): tuple(s) for q, s in header["question_subjects"].items()}
    model = build_model(header["kind"], header["task"], config, seed=0,
                        question_subjects=graph)
    params = model.named_parameters()
    listed = [name for name, _ in header["params"]]
    if listed != list(params):
        raise DataError(f"{path}: parameter list does not match architecture")
    offset = 0
    for name, shape in header["params"]:
        n = int(np.prod(shape))
        if offset + n * 8 > len(payload):
            raise DataError(f"{path}: payload truncated at parameter {name}")
        arr = np.frombuffer(payload, dtype="<f8", count=n, offset=offset).reshape(shape)
        if tuple(shape) != params[name].values.shape:
            raise DataError(f"{path}: shape mismatch for {name}")
        params[name].values = arr.copy()
        offset += n * 8
    if offset != len(payload):
        raise DataError(f"{path}: payload size does not match header shapes")
    return model


def head_probabilities(model: BaseModel, logits: np.ndarray) -> np.ndarray:
    """Option task: softmax rows. Correctness task: sigmoid scalar column."""
    if model.task == "option":
        shifted = logits - logits.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=-1, keepdims=True)
    return 1.0 / (1.0 + np.exp(-logits))


def output_head(model: BaseModel, features: ad.Tensor) -> ad.Tensor:
    """Apply the model's prediction head to a feature tensor."""
    if not hasattr(model, "head"):
        raise ConfigError(f"{model.kind} has no standalone prediction head")
    if features.values.shape[-1] != model.head.widths[0]:
        raise ConfigError(f"features of width {features.values.shape[-1]} do not match "
                          f"head input width {model.head.widths[0]}")
    return model.head(features)


def predicted_option(probabilities: np.ndarray) -> np.ndarray:
    """Argmax per row; ties go to the lowest option index."""
    return probabilities.argmax(axis=-1)


def forward_sequences(model: BaseModel, sequences) -> list:
    """Per-sequence logits arrays of shape (T, out), no graph recorded."""
    batch = make_batch(sequences, model.config)
    flat, order = model.forward_batch(batch)
    B, T = batch.size
    values = flat.values
    if order == "tb":
        cube = values.reshape(T, B, -1).transpose(1, 0, 2)
    else:
        cube = values.reshape(B, T, -1)
    return [cube[b, :len(seq.events)] for b, seq in enumerate(sequences)]


def _single(model, sequence: StudentSequence) -> np.ndarray:
    return forward_sequences(model, [sequence])[0]


def ncf_forward(model: BaseModel, student_id: int, question_id: int, subject_ids) -> np.ndarray:
    """Logits for one (student, question) query."""
    if model.kind != "ncf":
        raise ConfigError(f"ncf_forward needs an ncf model, got {model.kind}")
    if student_id >= model.config.num_students or question_id >= model.config.num_questions:
        raise DataError(f"unknown student {student_id} or question {question_id}")
    x = ad.concat([
        ad.gather_rows(model.tables.question, [question_id]),
        ad.gather_rows(model.tables.user, [student_id]),
        ad.matmul(ad.constant(subject_multihot([subject_ids], model.config.num_subjects)),
                  model.tables.subject),
    ])
    return model.head(x).values[0]


def pobidkt_forward(model, sequence) -> np.ndarray:
    if model.kind != "pobidkt":
        raise ConfigError(f"pobidkt_forward needs a pobidkt model, got {model.kind}")
    return _single(model, sequence)


def bigikt_forward(model, sequence) -> np.ndarray:
    if model.kind != "bigikt":
        raise ConfigError(f"bigikt_forward needs a bigikt model, got {model.kind}")
    return _single(model, sequence)


def dkt_forward(model, sequence) -> np.ndarray:
    if model.kind != "dkt":
        raise ConfigError(f"dkt_forward needs a dkt model, got {model.kind}")
    return _single(model, sequence)


def dkvmn_forward(model, sequence) -> np.ndarray:
    if model.kind != "dkvmn":
        raise ConfigError(f"dkvmn_forward needs a dkvmn model, got {model.kind}")
    return _single(model, sequence)


def akt_forward(model, sequence) -> np.ndarray:
    if model.kind != "akt":
        raise ConfigError(f"akt_forward needs an akt model, got {model.kind}")
    return _single(model, sequence)


def pair_model_forward(model, sequence) -> np.ndarray:
    """Per-step probabilities over the four options."""
    if model.kind != "pair":
        raise ConfigError(f"pair_model_forward needs a pair model, got {model.kind}")
    return head_probabilities(model, _single(model, sequence))
