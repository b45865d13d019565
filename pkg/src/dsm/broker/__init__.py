"""Embedded pub/sub broker speaking an MQTT 3.1.1 subset over TCP.

Supported packets: CONNECT/CONNACK, PUBLISH/PUBACK (QoS 0 and 1),
SUBSCRIBE/SUBACK, UNSUBSCRIBE/UNSUBACK, PINGREQ/PINGRESP, DISCONNECT.
No QoS 2, retained messages, persistent sessions, or wills.
"""

from .matching import TopicFilter, match_topic
from .server import Broker, BrokerConfig
from .client import MqttClient

__all__ = ["TopicFilter", "match_topic", "Broker", "BrokerConfig", "MqttClient"]
