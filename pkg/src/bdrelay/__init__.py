"""Buffer-aided two-way relaying: protocols, simulator, and benchmarks.

Two users exchange data through a half-duplex decode-and-forward relay
with no direct link.  The relay buffers each direction's data, and every
slot one of six transmission modes is selected: two uplinks, a
multiple-access uplink, two downlinks, and a broadcast downlink.  The
package calibrates and runs the optimal adaptive mode-selection protocols
(joint power allocation under a long-term budget, and fixed per-node
powers), conventional benchmark protocols posed as linear programs, and
tools to trace long-term rate regions, mode statistics, power use, and
buffering delay.
"""

__version__ = "0.1.0"
