"""Live run service: frames out, steering commands in.

One frame (``frame.v1``) is broadcast per simulation tick over a websocket;
clients send ``command.v1`` messages (move_target, pause, resume, reset).
Commands are queued and drained by the simulation thread exactly once per
tick, so no frame ever reflects a partially applied command. The service is
fire-and-forget for viewers: with no clients connected the run proceeds
exactly as headless.
"""

import asyncio
import json
import queue
import threading

from websockets.asyncio.server import serve

COMMAND_VERSION = "command.v1"
KINDS = ("move_target", "pause", "resume", "reset")


class ResetRequested(Exception):
    """Raised out of the tick loop when a client asked for a fresh run."""


def _parse_command(raw):
    """Validate one wire message; returns (command dict, None) or
    (None, reason string)."""
    try:
        msg = json.loads(raw)
    except (json.JSONDecodeError, UnicodeDecodeError):
        return None, "message is not valid JSON"
    if not isinstance(msg, dict):
        return None, "message must be a JSON object"
    if msg.get("schema_version") != COMMAND_VERSION:
        return None, f"schema_version must be {COMMAND_VERSION!r}"
    kind = msg.get("kind")
    if kind not in KINDS:
        return None, f"kind must be one of {', '.join(KINDS)}"
    if kind == "move_target":
        tid = msg.get("target")
        pos = msg.get("position")
        if not isinstance(tid, int):
            return None, "move_target needs an integer target id"
        if (not isinstance(pos, (list, tuple)) or len(pos) != 3
                or not all(isinstance(c, (int, float)) for c in pos)):
            return None, "move_target needs position [x, y, z]"
        return {"kind": kind, "target": tid,
                "position": [float(c) for c in pos]}, None
    return {"kind": kind}, None


class BridgeServer:
    """Websocket side of a live run.

    The caller wires ``frame_sink`` and ``command_source`` into ``sim.run``.
    The server owns a daemon thread with its own event loop; the simulation
    thread never touches asyncio directly.
    """

    def __init__(self, host="127.0.0.1", port=8765):
        self.host = host
        self.port = port
        self._commands = queue.Queue()
        self._running = threading.Event()
        self._running.set()
        self._reset = False
        self._clients = set()
        self._last_frame = None
        self._loop = None
        self._server = None
        self._ready = threading.Event()
        self._thread = None

    # -- lifecycle ---------------------------------------------------------

    def start(self):
        self._thread = threading.Thread(target=self._serve_forever,
                                        name="bridge", daemon=True)
        self._thread.start()
        if not self._ready.wait(timeout=10.0):
            raise RuntimeError("bridge server did not come up")
        return self

    def stop(self):
        if self._loop is None:
            return
        self._loop.call_soon_threadsafe(self._shutdown)
        self._thread.join(timeout=10.0)

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()

    def _shutdown(self):
        if self._server is not None:
            self._server.close()
        self._loop.stop()

    def _serve_forever(self):
        self._loop = asyncio.new_event_loop()
        asyncio.set_event_loop(self._loop)

        async def boot():
            self._server = await serve(self._handler, self.host, self.port)
            self._ready.set()

        self._loop.run_until_complete(boot())
        try:
            self._loop.run_forever()
        finally:
            self._loop.close()

    # -- websocket side (event loop thread) --------------------------------

    async def _handler(self, websocket):
        self._clients.add(websocket)
        try:
            if self._last_frame is not None:
                await websocket.send(self._last_frame)
            async for raw in websocket:
                cmd, why = _parse_command(raw)
                if cmd is None:
                    await websocket.send(json.dumps(
                        {"type": "command_result", "applied": False,
                         "reason": why}))
                    continue
                cmd["_reply"] = self._replier(websocket)
                self._commands.put(cmd)
        finally:
            self._clients.discard(websocket)

    def _replier(self, websocket):
        def reply(entry):
            payload = json.dumps({"type": "command_result", **entry})
            self._loop.call_soon_threadsafe(self._post, websocket, payload)
        return reply

    def _post(self, websocket, payload):
        if websocket in self._clients:
            asyncio.ensure_future(self._send_quiet(websocket, payload))

    async def _send_quiet(self, websocket, payload):
        try:
            await websocket.send(payload)
        except Exception:
            self._clients.discard(websocket)

    def _broadcast(self, payload):
        for ws in list(self._clients):
            asyncio.ensure_future(self._send_quiet(ws, payload))

    # -- simulation side (sim thread) ---------------------------------------

    def frame_sink(self, frame):
        payload = json.dumps(frame, sort_keys=True)
        self._last_frame = payload
        if self._loop is not None:
            self._loop.call_soon_threadsafe(self._broadcast, payload)

    def command_source(self, tick):
        """Drain queued commands at a tick boundary.

        Blocks while paused (resume/reset still drain); returns the
        move_target commands for the simulation to apply this tick.
        """
        moves = []
        while True:
            try:
                cmd = self._commands.get_nowait()
            except queue.Empty:
                if self._running.is_set():
                    break
                try:
                    cmd = self._commands.get(timeout=0.1)
                except queue.Empty:
                    continue
            self._apply_control(cmd, moves)
            if self._reset:
                self._reset = False
                raise ResetRequested()
        return moves

    def _apply_control(self, cmd, moves):
        kind = cmd["kind"]
        reply = cmd.get("_reply")
        if kind == "move_target":
            moves.append(cmd)
            return
        if kind == "pause":
            self._running.clear()
        elif kind == "resume":
            self._running.set()
        elif kind == "reset":
            self._running.set()
            self._reset = True
        if reply is not None:
            reply({"kind": kind, "applied": True, "reason": None})
