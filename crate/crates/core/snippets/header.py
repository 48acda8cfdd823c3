# gridforge run header. Paste at the top of a script; it keeps working when
# run by hand because every flag has a default.
import argparse
import json
import os
import urllib.request


def get_platform_parameters(argv=None):
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--app_dir", default=".")
    p.add_argument("--checkpoint_dir", default="./checkpoint")
    p.add_argument("--output_dir", default="./output")
    p.add_argument("--rank", type=int, default=0)
    p.add_argument("--repetitions", type=int, default=1)
    p.add_argument("--master_addr", default="127.0.0.1")
    p.add_argument("--master_port", type=int, default=0)
    p.add_argument("--parameters", default="")
    args, _ = p.parse_known_args(argv)
    args.parameters = [v for v in args.parameters.split(",") if v] if args.parameters else []
    os.makedirs(args.output_dir, exist_ok=True)
    os.makedirs(args.checkpoint_dir, exist_ok=True)
    return args


class Progress:
    """Optional progress reporting to the local agent."""

    def __init__(self):
        self.url = os.environ.get("GRIDFORGE_PROGRESS_URL")

    def send(self, message, percent=None):
        if not self.url:
            return
        body = json.dumps({"message": message, "percent": percent}).encode()
        req = urllib.request.Request(
            self.url, data=body, headers={"Content-Type": "application/json"}
        )
        try:
            urllib.request.urlopen(req, timeout=2).close()
        except OSError:
            pass
