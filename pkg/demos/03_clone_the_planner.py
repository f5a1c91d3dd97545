"""Distill the lookahead planner into a small MLP with dataset aggregation.

Run from the repo root:  python demos/03_clone_the_planner.py  (takes ~15s)
"""

from abrlab.imitation import BcConfig, pretrain
from abrlab.net import make_greedy_policy
from abrlab.sim import QoEWeights, VideoSpec, run_session
from abrlab.traces import SynthConfig, synthesize_trace


def main():
    train = [synthesize_trace(SynthConfig(duration_s=600, seed=(21, i)), trace_id=f"train-{i:02d}")
             for i in range(30)]
    held_out = synthesize_trace(SynthConfig(duration_s=600, seed=(22, 0)), trace_id="held-out")

    spec = VideoSpec()
    w = QoEWeights()
    cfg = BcConfig(dagger_iterations=5, rollout_steps=600, epochs=4,
                   batch_size=128, learning_rate=1e-3, expert_horizon=4)

    net, history = pretrain(train, spec, w, cfg, seed=0)

    print("dataset grows as the learner's own states get expert labels:")
    print(f"{'round':>5s} {'dataset':>8s} {'loss':>8s} {'agreement':>10s}")
    for row in history:
        print(f"{row['round']:5d} {row['dataset_size']:8d} {row['loss']:8.4f} {row['agreement']:10.3f}")

    log = run_session(held_out, spec, w, make_greedy_policy(net, spec))
    print(f"\ncloned policy on a held-out trace: qoe {log.session_qoe:.1f}, "
          f"rebuffer {log.session_rebuffer_s:.2f}s over {len(log.outcomes)} chunks")


if __name__ == "__main__":
    main()
