"""CLI: gsedit-bridge serve|finetune."""

from __future__ import annotations

import argparse
import json
import sys

from .server import BridgeConfig, BridgeServer


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="gsedit-bridge")
    sub = parser.add_subparsers(dest="command", required=True)

    p_serve = sub.add_parser("serve", help="answer GSGP requests")
    p_serve.add_argument("--listen", default="127.0.0.1:7341")
    p_serve.add_argument("--model", default="runwayml/stable-diffusion-v1-5")
    p_serve.add_argument("--checkpoint", default=None,
                         help="DreamBooth fine-tune directory")
    p_serve.add_argument("--keyword-tokens", default=None,
                         help='JSON object mapping keywords to rare tokens, '
                              'e.g. \'{"dog": "sks"}\'')
    p_serve.add_argument("--device", default="cpu")
    p_serve.add_argument("--timeout", type=float, default=120.0)
    p_serve.add_argument("--echo", action="store_true",
                         help="model-free transport-test mode")

    p_tune = sub.add_parser("finetune", help="DreamBooth fine-tune")
    p_tune.add_argument("--dataset", required=True)
    p_tune.add_argument("--keyword", required=True)
    p_tune.add_argument("--class-prompt", required=True)
    p_tune.add_argument("--out", required=True)
    p_tune.add_argument("--model", default="runwayml/stable-diffusion-v1-5")
    p_tune.add_argument("--steps", type=int, default=800)
    p_tune.add_argument("--device", default="cuda")

    args = parser.parse_args(argv)
    if args.command == "serve":
        host, _, port = args.listen.rpartition(":")
        tokens = json.loads(args.keyword_tokens) if args.keyword_tokens else {}
        config = BridgeConfig(host=host or "127.0.0.1", port=int(port),
                              model_id=args.model, checkpoint=args.checkpoint,
                              keyword_tokens=tokens, device=args.device,
                              timeout=args.timeout, echo=args.echo)
        try:
            server = BridgeServer(config)
        except RuntimeError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 1
        print(f"listening on {config.host}:{server.port} "
              f"({'echo' if config.echo else config.model_id})", flush=True)
        try:
            server.serve_forever()
        except KeyboardInterrupt:
            server.stop()
        return 0

    if args.command == "finetune":
        from .finetune import FinetuneError, dreambooth_finetune
        try:
            out = dreambooth_finetune(args.dataset, args.keyword,
                                      args.class_prompt, args.out,
                                      model_id=args.model, steps=args.steps,
                                      device=args.device)
        except FinetuneError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 1
        print(f"checkpoint written to {out}")
        return 0
    return 2


if __name__ == "__main__":
    sys.exit(main())
