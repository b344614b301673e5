"""Request/response channel between the AS and the CSP.

Two transports carry the same frames: an in-process one that hands each
frame straight to the CSP object (deterministic, used by tests), and a
length-prefixed TCP one for running the CSP in its own process.
"""
from __future__ import annotations

import socket
import socketserver
import threading

from ..errors import ProtocolError
from .transcript import AS_TO_CSP, CSP_TO_AS, Transcript
from .wire import MessageType, decode_frame, digest, encode_frame, read_frame


class InProcessTransport:
    def __init__(self, csp):
        self.csp = csp

    def roundtrip(self, frame):
        return self.csp.handle(frame)

    def close(self):
        pass


class TcpTransport:
    def __init__(self, host, port, timeout=None):
        self._sock = socket.create_connection((host, port), timeout=timeout)
        self._sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._reader = self._sock.makefile("rb")

    def roundtrip(self, frame):
        try:
            self._sock.sendall(frame)
            reply = read_frame(self._reader.read)
        except OSError as exc:
            raise ProtocolError(f"transport failure: {exc}") from exc
        if reply is None:
            raise ProtocolError("CSP closed the connection")
        return reply

    def close(self):
        try:
            self._reader.close()
            self._sock.close()
        except OSError:
            pass


class Channel:
    """Frames requests, records both directions in a :class:`Transcript`."""

    def __init__(self, transport, transcript=None):
        self.transport = transport
        self.transcript = transcript if transcript is not None else Transcript()
        self._lock = threading.Lock()

    def request(self, msg_type, payload, function=None, sizes=()):
        frame = encode_frame(msg_type, payload)
        with self._lock:
            self.transcript.record(AS_TO_CSP, msg_type, digest(frame), len(frame), function, sizes)
            reply = self.transport.roundtrip(frame)
            reply_type, reply_payload = decode_frame(reply)
            self.transcript.record(CSP_TO_AS, reply_type, digest(reply), len(reply), function if reply_type is MessageType.TWOPC_RESULT else None, sizes)
        return reply_type, reply_payload

    def close(self):
        self.transport.close()


class _Handler(socketserver.StreamRequestHandler):
    def handle(self):
        csp = self.server.csp
        while True:
            frame = read_frame(self.rfile.read)
            if frame is None:
                return
            self.wfile.write(csp.handle(frame))
            self.wfile.flush()


class CspTcpServer(socketserver.TCPServer):
    """Serves one AS connection at a time, which serializes ledger updates."""

    allow_reuse_address = True

    def __init__(self, csp, host="127.0.0.1", port=0):
        self.csp = csp
        super().__init__((host, port), _Handler)

    @property
    def port(self):
        return self.server_address[1]

    def serve_in_thread(self):
        t = threading.Thread(target=self.serve_forever, name="csp-tcp", daemon=True)
        t.start()
        return t
