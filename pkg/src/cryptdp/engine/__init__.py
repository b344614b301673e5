"""AS and CSP parties, their wire protocol, the privacy ledger and the program executor.

Submodules are imported explicitly (``cryptdp.engine.parties`` and so on);
the package itself stays import-light so lower layers can use the wire
helpers without pulling in the parties.
"""
