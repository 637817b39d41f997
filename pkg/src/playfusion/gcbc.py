"""Goal-conditioned regression baseline.

Same instruction features and goal encoders as the diffusion model (no
codebooks); an MLP head maps the goal vector straight to a normalised action
chunk and is trained with mean squared error.
"""

from __future__ import annotations

import numpy as np

from . import nn
from .errors import VocabularyError
from .goals import GoalEncoder, language_table


class GCBCModel:
    kind = "gcbc"

    def __init__(self, cfg, vocab, params=None, seed=0, hidden=256):
        self.cfg = cfg
        self.vocab = vocab
        self.hidden = hidden
        self.goals = GoalEncoder(cfg.goal_config())
        gdim = cfg.lang_dim + cfg.state_out
        self.head = nn.MLP("gcbc_head", gdim, hidden, cfg.T_a * cfg.action_dim)
        self.lang_table = language_table(vocab, cfg.lang_feat_dim)
        if params is None:
            rng = np.random.default_rng(seed)
            params = {}
            self.goals.init(params, rng, with_codebook=False)
            self.head.init(params, rng)
        self.params = params
        self.schedule = None

    @property
    def n_params(self):
        return int(sum(v.size for v in self.params.values()))

    def trainable_keys(self):
        return sorted(self.params)

    def lang_features(self, instr):
        instr = np.asarray(instr)
        if instr.size and (instr.min() < 0 or instr.max() >= len(self.lang_table)):
            raise VocabularyError(f"instruction id outside vocabulary of {len(self.lang_table)}")
        return self.lang_table[instr]

    def forward(self, instr, states):
        p = self.params
        lang, state, _, c_goal = self.goals.forward(p, self.lang_features(instr), states)
        goal = np.concatenate([lang, state], axis=1)
        out, c_head = self.head.forward(p, goal)
        pred = out.reshape(len(goal), self.cfg.T_a, self.cfg.action_dim)
        return pred, (c_goal, c_head)

    def predict(self, instr, states):
        return self.forward(instr, states)[0]

    def loss_and_grads(self, batch):
        pred, (c_goal, c_head) = self.forward(batch["instr"], batch["states"])
        target = batch["actions"]
        mse = float(np.mean((pred - target) ** 2))
        grads = {}
        p = self.params
        d_out = (2.0 * (pred - target) / pred.size).reshape(len(pred), -1)
        d_goal = self.head.backward(p, grads, c_head, d_out)
        dl = self.cfg.lang_dim
        self.goals.backward(p, grads, c_goal, d_goal[:, :dl], d_goal[:, dl:])
        for key in p:
            if key not in grads:
                grads[key] = np.zeros_like(p[key])
        return {"action_mse": mse, "total": mse}, grads
