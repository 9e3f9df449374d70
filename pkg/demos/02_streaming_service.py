"""Run the HTTP service in-process, stream a few visits in and read channels back."""

import http.client
import json
import threading

from nearline.model import production_channel_configs
from nearline.service import AppConfig, NearlineService, make_server

configs = production_channel_configs(queue_capacity=8, category_cap=50)
service = NearlineService(AppConfig(configs))
server = make_server(service, "127.0.0.1:0")
threading.Thread(target=server.serve_forever, daemon=True).start()
host, port = server.server_address[:2]
print(f"listening on {host}:{port}")
for sid, c in configs.items():
    print(f"  channel {sid:<14} truncation={c.truncation:<4} k={c.k}")

conn = http.client.HTTPConnection(host, port)


def call(method, path, body=None):
    conn.request(method, path, body=body)
    resp = conn.getresponse()
    return resp.status, resp.read()


def event(event_id, scenario, t, n):
    items = [{"item_id": f"{scenario[:2]}-{j}", "category_id": f"c{j % 7}", "score": round(1 - j / n, 4)}
             for j in range(n)]
    return json.dumps({"event_id": event_id, "user_id": "bob", "scenario_id": scenario,
                       "access_time": 1_700_000_000_000 + t, "items": items})


# a search returning 800 items is cut to 500; an in-shop list of 30 to 20
body = "\n".join([event("a", "main_search", 0, 800), event("b", "in_shop", 5, 30),
                  event("a", "main_search", 0, 800), "{oops", event("c", "livestream", 9, 5)])
status, raw = call("POST", "/v1/ingest", body)
out = json.loads(raw)
print("\ningest:", status, {k: out[k] for k in ("applied", "duplicate", "dropped")})
for ack in out["acks"]:
    print("  ", ack)

status, raw = call("GET", "/v1/retrieve?user_id=bob&scenario=main_search&scenario=in_shop&k=3")
resp = json.loads(raw)
for sid, ch in resp["channels"].items():
    print(f"\n{sid}: first {len(ch['items'])} items")
    for item in ch["items"]:
        print("  ", item)

status, raw = call("GET", "/v1/retrieve?user_id=bob")
sizes = {sid: len(ch["items"]) for sid, ch in json.loads(raw)["channels"].items()}
print("\nfull channel sizes:", sizes)

print()
print(call("GET", "/v1/metrics")[1].decode().split("nearline_retrieve_latency")[0])
server.shutdown()
