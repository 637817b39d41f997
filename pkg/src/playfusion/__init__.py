"""Goal-conditioned diffusion policies with vector-quantized bottlenecks.

Typical flow::

    from playfusion.playworld import WorldConfig
    from playfusion.dataset import generate_store
    from playfusion.trainer import TrainConfig, train
    from playfusion.policy import policy_from_trainer, rollout

    world = WorldConfig()
    store = generate_store(world, 300, seed=0)
    tr = train(store, TrainConfig(steps=2000))
    rec = rollout(policy_from_trainer(tr), world, instruction=0, max_steps=64)
"""

__version__ = "0.1.0"
