"""The shape pipeline from raw behaviors to the classification row,
printed for the stock variants and a custom geometry."""

from splitformer import ModelConfig, planned_trace


def show(cfg):
    tr = planned_trace(cfg)
    print(f"{cfg.variant}: l={cfg.l}, D={cfg.d}")
    print(f"  tokens {tr.token_shape[0]} x {tr.token_shape[1]}")
    for i, s in enumerate(tr.stage_shapes, start=2):
        w, stride = cfg.stages[i - 2].window, cfg.stages[i - 2].stride
        print(f"  stage {i}: {s['input'][0]} x {s['input'][1]}"
              f" -> {s['output'][0]} x {s['output'][1]}"
              f"   (window {w}, stride {stride})")
    print(f"  classifier reads row 0 at width {tr.cls_width}")
    print()


def main():
    # sixteen thousand behaviors shrink to 129 rows in two stages
    show(ModelConfig.from_variant("B", l=16384))
    show(ModelConfig.from_variant("L", l=4096))
    # geometry is free as long as stride <= window and widths split across heads
    show(ModelConfig.custom(8, 256, windows=(16, 8), strides=(8, 2),
                            w_counts=(2, 2), n_heads=8))


if __name__ == "__main__":
    main()
